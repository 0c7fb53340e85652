//! Run manifest: command, effective configuration and written artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Format versions of the artifacts this build reads and writes.
#[derive(Serialize)]
struct Versions {
    fasgen: &'static str,
    checkpoint: u32,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    full_scale: bool,
    threads: usize,
    outputs: Vec<String>,
    versions: Versions,
    inputs: &'a BTreeMap<String, String>,
    config: &'a C,
}

/// Collects inputs and outputs for one command run.
pub struct Run {
    command: &'static str,
    full_scale: bool,
    threads: usize,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    pub fn new(command: &'static str, full_scale: bool, threads: usize) -> Self {
        Self {
            command,
            full_scale,
            threads,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.into(), path.display().to_string());
    }

    /// Writes `contents` to `dir/name` and records it.
    pub fn write(&mut self, dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let p = dir.join(name);
        fs::write(&p, contents).map_err(|e| fasgen_core::Error::io(&p, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn record(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    /// Writes `manifest.toml` with the effective configuration.
    pub fn finish<C: Serialize>(mut self, dir: &Path, config: &C) -> anyhow::Result<()> {
        self.outputs.sort();
        let m = Manifest {
            command: self.command,
            full_scale: self.full_scale,
            threads: self.threads,
            outputs: self.outputs,
            versions: Versions {
                fasgen: env!("CARGO_PKG_VERSION"),
                checkpoint: fasgen_core::cgm::CHECKPOINT_VERSION,
            },
            inputs: &self.inputs,
            config,
        };
        let text = toml::to_string(&m).context("serializing manifest")?;
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, text).map_err(|e| fasgen_core::Error::io(&p, e))?;
        Ok(())
    }
}
