//! Shared binary container: magic bytes, version byte, length-prefixed JSON
//! header, raw little-endian f64 payload, trailing CRC32 of the payload.
//! Used by both the calibration file (STQC) and the checkpoint file (STQK).

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub(crate) const VERSION: u8 = 1;

pub(crate) fn write_container(
    path: &Path,
    magic: &[u8; 4],
    header: &serde_json::Value,
    payload: &[f64],
) -> Result<()> {
    let header_bytes = serde_json::to_vec(header).map_err(|e| Error::format(e))?;
    let mut payload_bytes = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        payload_bytes.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&payload_bytes);
    let mut f = std::fs::File::create(path)?;
    f.write_all(magic)?;
    f.write_all(&[VERSION])?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&payload_bytes)?;
    f.write_all(&crc.to_le_bytes())?;
    Ok(())
}

pub(crate) struct ContainerReader {
    bytes: Vec<u8>,
    header: serde_json::Value,
    payload_start: usize,
}

impl ContainerReader {
    pub(crate) fn open(path: &Path, magic: &[u8; 4]) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 13 {
            return Err(Error::format("truncated container: missing header"));
        }
        if &bytes[0..4] != magic {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                &bytes[0..4],
                magic
            )));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(format!("unsupported version {}", bytes[4])));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let payload_start = 13 + hlen;
        if bytes.len() < payload_start {
            return Err(Error::format("truncated container: header cut short"));
        }
        let header: serde_json::Value = serde_json::from_slice(&bytes[13..payload_start])
            .map_err(|e| Error::format(format!("malformed JSON header: {}", e)))?;
        Ok(ContainerReader {
            bytes,
            header,
            payload_start,
        })
    }

    pub(crate) fn header(&self) -> &serde_json::Value {
        &self.header
    }

    /// Read the payload, validating length (from the header-derived element
    /// count) and the trailing CRC32.
    pub(crate) fn payload(&self, n_elems: usize) -> Result<Vec<f64>> {
        let want = self.payload_start + n_elems * 8 + 4;
        if self.bytes.len() < want {
            return Err(Error::format(format!(
                "truncated payload: file has {} bytes, header implies {}",
                self.bytes.len(),
                want
            )));
        }
        if self.bytes.len() > want {
            return Err(Error::format(format!(
                "payload size mismatch: {} trailing bytes beyond header-declared count",
                self.bytes.len() - want
            )));
        }
        let payload_bytes = &self.bytes[self.payload_start..self.payload_start + n_elems * 8];
        let crc_stored = u32::from_le_bytes(
            self.bytes[self.payload_start + n_elems * 8..want]
                .try_into()
                .unwrap(),
        );
        let crc = crc32fast::hash(payload_bytes);
        if crc != crc_stored {
            return Err(Error::format(format!(
                "checksum mismatch: computed {:08x}, stored {:08x}",
                crc, crc_stored
            )));
        }
        Ok(payload_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
