//! Run manifests: every artifact-producing command writes exactly one,
//! recording the resolved configuration, seed, source revision and timing.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use anyhow::Result;
use serde::Serialize;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub git_describe: String,
    pub started_at: String,
    pub finished_at: String,
    pub out_dir: String,
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

pub struct ManifestTimer {
    command: String,
    config: BTreeMap<String, String>,
    seed: u64,
    started_at: String,
}

impl ManifestTimer {
    pub fn start(command: &str, config: BTreeMap<String, String>, seed: u64) -> ManifestTimer {
        ManifestTimer {
            command: command.to_string(),
            config,
            seed,
            started_at: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn write(self, out_dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            git_describe: git_describe(),
            started_at: self.started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            out_dir: out_dir.display().to_string(),
        };
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(
            out_dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }
}
