//! Record framing shared by every log file.
//!
//! ```text
//! +----------------+----------------+---------------------+
//! | len: u32 LE    | crc32: u32 LE  | payload: len bytes  |
//! +----------------+----------------+---------------------+
//! ```
//!
//! `crc32` is the IEEE CRC-32 of the payload alone. A reader stops at the
//! first record that is incomplete, oversized or fails its checksum, and
//! recovery truncates the file there.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

pub const HEADER_LEN: usize = 8;
/// Records larger than this are treated as corruption.
pub const MAX_RECORD: u32 = 64 << 20;

pub fn encode_record(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits `bytes` into payloads. The second value is the length of the valid
/// prefix; anything after it is a torn or corrupt tail.
pub fn decode_records(bytes: &[u8]) -> (Vec<&[u8]>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    while bytes.len() - pos >= HEADER_LEN {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes"));
        if len > MAX_RECORD {
            break;
        }
        let start = pos + HEADER_LEN;
        let end = start + len as usize;
        if end > bytes.len() {
            break;
        }
        let payload = &bytes[start..end];
        if crc32fast::hash(payload) != crc {
            break;
        }
        out.push(payload);
        pos = end;
    }
    (out, pos)
}

/// An append-only log file.
#[derive(Debug)]
pub struct LogFile {
    path: PathBuf,
    file: File,
    fsync: bool,
}

impl LogFile {
    /// Opens (creating if needed) and recovers the log, returning the intact
    /// payloads. A torn tail is cut off so later appends start clean.
    pub fn open(path: &Path, fsync: bool) -> io::Result<(Self, Vec<Vec<u8>>)> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (records, valid) = decode_records(&bytes);
        let records = records.into_iter().map(<[u8]>::to_vec).collect();
        if valid < bytes.len() {
            tracing::warn!(path = %path.display(), discarded = bytes.len() - valid, "truncating torn log tail");
            file.set_len(valid as u64)?;
            file.sync_data()?;
        }
        Ok((Self { path: path.to_path_buf(), file, fsync }, records))
    }

    pub fn append(&mut self, payload: &[u8]) -> io::Result<()> {
        self.file.write_all(&encode_record(payload))?;
        if self.fsync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    /// Empties the log after its contents were captured by a snapshot.
    pub fn reset(&mut self) -> io::Result<()> {
        self.file.set_len(0)?;
        self.file.sync_data()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
