//! Append-only record file: the header `GATEJRNL1`, then frames of a
//! big-endian `u32` length followed by that many payload bytes.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 9] = b"GATEJRNL1";

/// Frames larger than this are treated as corruption, not allocated.
const MAX_FRAME: u32 = 16 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("{path}: not a journal file")]
    BadMagic { path: PathBuf },
    #[error("{path}: frame at offset {offset} is corrupt")]
    Corrupt { path: PathBuf, offset: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug)]
pub struct Journal {
    file: File,
    path: PathBuf,
}

impl Journal {
    /// Opens or creates the journal and returns every complete frame. A
    /// trailing partial frame, as left by a crash mid-append, is cut off.
    pub fn open(path: &Path) -> Result<(Journal, Vec<Vec<u8>>), JournalError> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.is_empty() {
            file.write_all(MAGIC)?;
            file.flush()?;
            bytes.extend_from_slice(MAGIC);
        }
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(JournalError::BadMagic {
                path: path.to_path_buf(),
            });
        }

        let mut frames = Vec::new();
        let mut pos = MAGIC.len();
        while pos < bytes.len() {
            let Some(head) = bytes.get(pos..pos + 4) else {
                break;
            };
            let len = u32::from_be_bytes(head.try_into().expect("four bytes"));
            if len > MAX_FRAME {
                return Err(JournalError::Corrupt {
                    path: path.to_path_buf(),
                    offset: pos as u64,
                });
            }
            let end = pos + 4 + len as usize;
            let Some(payload) = bytes.get(pos + 4..end) else {
                break;
            };
            frames.push(payload.to_vec());
            pos = end;
        }
        if pos < bytes.len() {
            file.set_len(pos as u64)?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok((
            Journal {
                file,
                path: path.to_path_buf(),
            },
            frames,
        ))
    }

    pub fn append(&mut self, payload: &[u8]) -> Result<(), JournalError> {
        let len = u32::try_from(payload.len())
            .ok()
            .filter(|l| *l <= MAX_FRAME)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
        let mut frame = Vec::with_capacity(4 + payload.len());
        frame.extend_from_slice(&len.to_be_bytes());
        frame.extend_from_slice(payload);
        self.file.write_all(&frame)?;
        self.file.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j");
        {
            let (mut j, frames) = Journal::open(&path).unwrap();
            assert!(frames.is_empty());
            j.append(b"one").unwrap();
            j.append(b"").unwrap();
            j.append(b"three").unwrap();
        }
        let (_, frames) = Journal::open(&path).unwrap();
        assert_eq!(frames, vec![b"one".to_vec(), vec![], b"three".to_vec()]);
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..9], b"GATEJRNL1");
        assert_eq!(&raw[9..16], &[0, 0, 0, 3, b'o', b'n', b'e']);
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j");
        {
            let (mut j, _) = Journal::open(&path).unwrap();
            j.append(b"ok").unwrap();
        }
        let mut raw = std::fs::read(&path).unwrap();
        let good = raw.len();
        raw.extend_from_slice(&[0, 0, 0, 9, b'x']);
        std::fs::write(&path, &raw).unwrap();
        {
            let (mut j, frames) = Journal::open(&path).unwrap();
            assert_eq!(frames, vec![b"ok".to_vec()]);
            assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, good);
            j.append(b"next").unwrap();
        }
        let (_, frames) = Journal::open(&path).unwrap();
        assert_eq!(frames, vec![b"ok".to_vec(), b"next".to_vec()]);
    }

    #[test]
    fn foreign_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j");
        std::fs::write(&path, b"hello world").unwrap();
        assert!(matches!(
            Journal::open(&path),
            Err(JournalError::BadMagic { .. })
        ));
        let mut raw = MAGIC.to_vec();
        raw.extend_from_slice(&u32::MAX.to_be_bytes());
        std::fs::write(&path, &raw).unwrap();
        assert!(matches!(
            Journal::open(&path),
            Err(JournalError::Corrupt { offset: 9, .. })
        ));
    }
}
