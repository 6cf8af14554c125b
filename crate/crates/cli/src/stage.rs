use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nbinv_core::checkpoint::file_sha256;
use serde::Serialize;

use crate::config::RunConfig;
use crate::ValidationError;

/// Output directory of one pipeline stage inside the run directory.
pub struct Stage {
    pub name: String,
    pub dir: PathBuf,
    inputs: Vec<PathBuf>,
}

impl Stage {
    /// Claims `dir`, refusing to reuse a non-empty one unless `overwrite`
    /// (or `resume`, which keeps its contents).
    pub fn open(name: &str, dir: PathBuf, overwrite: bool, resume: bool) -> Result<Self> {
        let used = dir.is_dir() && std::fs::read_dir(&dir)?.next().is_some();
        if used && !resume {
            if !overwrite {
                return Err(ValidationError(vec![format!(
                    "{} already holds outputs of an earlier `{name}` run; pass --overwrite to replace them",
                    dir.display()
                )])
                .into());
            }
            std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { name: name.into(), dir, inputs: Vec::new() })
    }

    pub fn in_run(cfg: &RunConfig, name: &str, overwrite: bool, resume: bool) -> Result<Self> {
        Self::open(name, cfg.run_dir().join(name), overwrite, resume)
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Writes `run_manifest.json`: the resolved config, seed and the hashes
    /// of every input and output file (logs, which carry wall-clock times,
    /// are listed without a hash).
    pub fn finish(&self, cfg: &RunConfig) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            stage: &'a str,
            tool_version: &'a str,
            seed: u64,
            config: &'a RunConfig,
            inputs: BTreeMap<String, String>,
            outputs: BTreeMap<String, String>,
        }
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.insert(p.display().to_string(), file_sha256(p)?);
        }
        let mut outputs = BTreeMap::new();
        collect(&self.dir, &self.dir, &mut outputs)?;
        let m = Manifest {
            stage: &self.name,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config: cfg,
            inputs,
            outputs,
        };
        std::fs::write(self.path("run_manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect(root, &p, out)?;
            continue;
        }
        let rel = p.strip_prefix(root).unwrap_or(&p).display().to_string();
        if rel == "run_manifest.json" {
            continue;
        }
        let hash = if rel.ends_with(".jsonl") { "log".to_string() } else { file_sha256(&p)? };
        out.insert(rel, hash);
    }
    Ok(())
}
