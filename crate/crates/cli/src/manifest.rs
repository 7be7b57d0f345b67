//! Output directories and their `manifest.json`.
//!
//! A manifest records what is needed to recreate the directory: the command,
//! its parameters (including the seed), the crate version, and the name and
//! SHA-256 of every input and output file. It holds no paths, timestamps or
//! host details, so two runs with equal inputs produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Version of the manifest layout itself.
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema: u32,
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub params: serde_json::Value,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// An input file read once, so its digest matches what was decoded.
pub struct Input {
    pub bytes: Vec<u8>,
    pub entry: FileEntry,
}

impl Input {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        let entry = FileEntry {
            name,
            sha256: sha256_hex(&bytes),
        };
        Ok(Self { bytes, entry })
    }
}

pub struct OutDir {
    dir: PathBuf,
    command: String,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

impl OutDir {
    pub fn create(dir: PathBuf, command: &str) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir,
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn input(&mut self, input: &Input) {
        self.inputs.push(input.entry.clone());
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(FileEntry {
            name: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn finish(self, seed: Option<u64>, params: serde_json::Value) -> Result<PathBuf> {
        let manifest = Manifest {
            schema: MANIFEST_SCHEMA,
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            params,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.dir)
    }
}
