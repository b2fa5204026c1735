//! Run manifests: the command that produced a directory, checksums of
//! what it read and wrote, and enough to run it again.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Command;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    #[serde(flatten)]
    pub command: Command,
    /// Absolute input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Tracks the files a command reads and writes.
#[derive(Debug)]
pub struct Run {
    pub out_dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    /// Creates `out_dir` and refuses to clobber any of `outputs` (or an
    /// existing manifest) unless `force` is set.
    pub fn start(out_dir: &Path, outputs: &[&str], force: bool) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
        if !force {
            for name in outputs.iter().chain(std::iter::once(&MANIFEST_FILE)) {
                let p = out_dir.join(name);
                if p.exists() {
                    bail!("{} already exists; pass --force to overwrite", p.display());
                }
            }
        }
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<PathBuf> {
        let abs = fs::canonicalize(path).with_context(|| format!("cannot read {}", path.display()))?;
        self.inputs.insert(abs.display().to_string(), sha256_file(&abs)?);
        Ok(abs)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        debug_assert!(self.outputs.iter().any(|o| o == name), "undeclared output {name}");
        self.out_dir.join(name)
    }

    /// Checksums every declared output and writes the manifest last, via a
    /// temporary file and a rename.
    pub fn finish(self, command: Command) -> Result<Manifest> {
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            let p = self.out_dir.join(name);
            if !p.is_file() {
                bail!("expected output {} was not written", p.display());
            }
            outputs.insert(name.clone(), sha256_file(&p)?);
        }
        let manifest = Manifest {
            tool: "loopembed".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            inputs: self.inputs,
            outputs,
        };
        let tmp = self.out_dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
        fs::rename(&tmp, self.out_dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }
}

pub fn load(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
    let m: Manifest = serde_json::from_slice(&bytes).with_context(|| format!("malformed manifest {}", path.display()))?;
    if m.tool != "loopembed" {
        bail!("{} was not written by loopembed", path.display());
    }
    if m.version != env!("CARGO_PKG_VERSION") {
        bail!(
            "manifest version {} does not match this build ({})",
            m.version,
            env!("CARGO_PKG_VERSION")
        );
    }
    Ok(m)
}

/// Inputs must be byte-identical to when the manifest was written.
pub fn check_inputs(m: &Manifest) -> Result<()> {
    for (path, sum) in &m.inputs {
        let now = sha256_file(Path::new(path))?;
        if &now != sum {
            bail!("input {path} changed since the manifest was written");
        }
    }
    Ok(())
}

/// Names of outputs whose checksums differ between two manifests.
pub fn diff_outputs(expected: &Manifest, actual: &Manifest) -> Vec<String> {
    let mut out: Vec<String> = expected
        .outputs
        .iter()
        .filter(|(k, v)| actual.outputs.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    out.extend(actual.outputs.keys().filter(|k| !expected.outputs.contains_key(*k)).cloned());
    out
}
