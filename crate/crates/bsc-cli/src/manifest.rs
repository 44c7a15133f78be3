//! Run manifest: records command, resolved config, input digests, and
//! outputs so a run can be audited and reproduced.
//!
//! The manifest is the only output file carrying timestamps; result files
//! stay byte-identical across reruns with the same inputs and seed.

use std::io::Read;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use bsc_core::config::HyperParams;
use bsc_core::error::{BscError, Result};
use bsc_core::nuts::SamplerSettings;

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    tool: String,
    version: String,
    command: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<HyperParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sampler: Option<SamplerSettings>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    started_at: String,
    finished_at: String,
}

pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: Option<HyperParams>,
    sampler: Option<SamplerSettings>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    started_at: String,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn sha256_file(path: &Path) -> Result<String> {
    let io = |e: std::io::Error| BscError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = std::fs::File::open(path).map_err(io)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf).map_err(io)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config: None,
            sampler: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn config(&mut self, hyper: &HyperParams, settings: &SamplerSettings) {
        self.config = Some(hyper.clone());
        self.sampler = Some(settings.clone());
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn finish(self, out_dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            tool: "bsc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            seed: self.seed,
            config: self.config,
            sampler: self.sampler,
            inputs: self.inputs,
            outputs: self.outputs,
            started_at: self.started_at,
            finished_at: now(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| BscError::Config(e.to_string()))?;
        let final_path = out_dir.join("run_manifest.json");
        let tmp_path = out_dir.join("run_manifest.json.tmp");
        let io = |e: std::io::Error| BscError::Io {
            path: final_path.display().to_string(),
            source: e,
        };
        // write-then-rename so a crash never leaves a truncated manifest
        std::fs::write(&tmp_path, json + "\n").map_err(io)?;
        std::fs::rename(&tmp_path, &final_path).map_err(io)?;
        Ok(())
    }
}
