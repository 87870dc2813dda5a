//! Output tree, atomic writes, hashing and run manifests.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use skul_core::CaptureKind;

use crate::error::{CliError, Result};

pub const MANIFEST_SCHEMA: &str = "skul-manifest/1";

/// Where every artifact of a run lives, relative to one root.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dump(&self, label: &str, kind: CaptureKind) -> PathBuf {
        self.root
            .join("dumps")
            .join(format!("{label}.{}.skuldmp", kind.short_name()))
    }

    pub fn dist(&self, label: &str, kind: CaptureKind, layer: usize) -> PathBuf {
        self.root.join("dists").join(format!(
            "{label}.{}.layer{layer}.skuldist.json",
            kind.short_name()
        ))
    }

    pub fn na_profile(&self, label: &str) -> PathBuf {
        self.root
            .join("profiles")
            .join(format!("{label}.naprof.json"))
    }

    pub fn ksd_profile(&self, label: &str) -> PathBuf {
        self.root
            .join("profiles")
            .join(format!("{label}.ksdprof.json"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn analysis(&self, name: &str) -> PathBuf {
        self.root.join("analysis").join(name)
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }

    /// `path` relative to the root when it lies inside it.
    pub fn display(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes through a temporary sibling and renames it into place, so readers
/// never see a half-written file.
pub fn write_atomic_with<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = tmp_path(path);
    let file = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    let result = fill(&mut w).and_then(|()| {
        w.flush().map_err(|e| CliError::io(&tmp, e))?;
        w.get_ref().sync_all().map_err(|e| CliError::io(&tmp, e))
    });
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    drop(w);
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic_with(path, |w| {
        w.write_all(bytes).map_err(|e| CliError::io(path, e))
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        match r.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => h.update(&buf[..n]),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(CliError::io(path, e)),
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to replay a command: config and input hashes, seeds,
/// tool version and resolved parameters. Contains no timestamps.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema: &'static str,
    pub command: String,
    pub tool_version: &'static str,
    pub config: FileHash,
    pub seeds: BTreeMap<String, u64>,
    pub parameters: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

/// Collects input and output hashes while a command runs.
#[derive(Debug)]
pub struct Recorder<'a> {
    layout: &'a Layout,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

impl<'a> Recorder<'a> {
    pub fn new(layout: &'a Layout) -> Self {
        Self {
            layout,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileHash {
            path: self.layout.display(path),
            sha256,
        });
        Ok(())
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(FileHash {
            path: self.layout.display(path),
            sha256: sha256_bytes(bytes),
        });
        Ok(())
    }

    pub fn write_with<F>(&mut self, path: &Path, fill: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        write_atomic_with(path, fill)?;
        let sha256 = sha256_file(path)?;
        self.outputs.push(FileHash {
            path: self.layout.display(path),
            sha256,
        });
        Ok(())
    }

    pub fn outputs(&self) -> &[FileHash] {
        &self.outputs
    }

    pub fn finish(
        self,
        command: &str,
        config: FileHash,
        seeds: BTreeMap<String, u64>,
        parameters: serde_json::Value,
    ) -> Result<PathBuf> {
        let manifest = Manifest {
            schema: MANIFEST_SCHEMA,
            command: command.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config,
            seeds,
            parameters,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = self.layout.manifest(command);
        write_atomic(&path, to_json(&manifest).as_bytes())?;
        Ok(path)
    }
}
