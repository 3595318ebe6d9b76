//! `manifest.json`: every file a command wrote into the output directory,
//! with its size and SHA-256.

use std::path::Path;

use moei::export::write_atomic;
use moei::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub file: String,
    pub command: String,
    pub bytes: usize,
    pub sha256: String,
}

pub struct Manifest {
    command: &'static str,
    entries: Vec<Entry>,
}

impl Manifest {
    /// The existing manifest of `dir`, if any, to be extended by `command`.
    pub fn load(dir: &Path, command: &'static str) -> Result<Self, Error> {
        let path = dir.join(FILE);
        let entries = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::Io { path, source: e }),
        };
        Ok(Manifest { command, entries })
    }

    pub fn record(&mut self, file: &str, bytes: &[u8]) {
        let sha256 = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
        let entry = Entry {
            file: file.to_string(),
            command: self.command.to_string(),
            bytes: bytes.len(),
            sha256,
        };
        match self.entries.iter_mut().find(|e| e.file == file) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn save(mut self, dir: &Path) -> Result<(), Error> {
        self.entries.sort_by(|a, b| a.file.cmp(&b.file));
        let mut bytes = serde_json::to_vec_pretty(&self.entries).map_err(|e| Error::Parse(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&dir.join(FILE), &bytes)
    }
}
