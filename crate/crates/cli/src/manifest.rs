//! Per-stage result manifests: inputs hash, outputs, wall time.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub inputs_hash: String,
    pub outputs: Vec<PathBuf>,
    pub wall_time_ms: u128,
}

/// SHA-256 over the canonical config bytes plus every input file's
/// contents, in order.
pub fn inputs_hash(config_bytes: &[u8], inputs: &[PathBuf]) -> anyhow::Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(config_bytes);
    for path in inputs {
        hasher.update(path.to_string_lossy().as_bytes());
        if path.is_file() {
            hash_file(&mut hasher, path)?;
        } else if path.is_dir() {
            // hash directory listings plus file contents, sorted for
            // determinism
            let mut entries: Vec<PathBuf> = walk(path)?;
            entries.sort();
            for e in entries {
                hasher.update(e.to_string_lossy().as_bytes());
                hash_file(&mut hasher, &e)?;
            }
        }
    }
    Ok(hex(&hasher.finalize()))
}

fn hash_file(hasher: &mut Sha256, path: &Path) -> anyhow::Result<()> {
    use std::io::Read;
    let mut f = std::fs::File::open(path)?;
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn walk(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            out.extend(walk(&p)?);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}

/// Runs a stage body, then writes `<out>/manifests/<stage>.json`.
pub fn with_manifest<F>(
    stage: &str,
    out_dir: &Path,
    config_bytes: &[u8],
    inputs: &[PathBuf],
    body: F,
) -> anyhow::Result<Vec<PathBuf>>
where
    F: FnOnce() -> anyhow::Result<Vec<PathBuf>>,
{
    let started = Instant::now();
    let outputs = body()?;
    let manifest = StageManifest {
        stage: stage.to_string(),
        inputs_hash: inputs_hash(config_bytes, inputs)?,
        outputs: outputs.clone(),
        wall_time_ms: started.elapsed().as_millis(),
    };
    let dir = out_dir.join("manifests");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join(format!("{stage}.json")),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    log::info!(
        "stage {stage} finished in {} ms, {} outputs",
        manifest.wall_time_ms,
        outputs.len()
    );
    Ok(outputs)
}

/// Fails with a staged-pipeline error naming the producing stage when an
/// artifact is missing.
pub fn require_artifact(path: &Path, produced_by: &str) -> anyhow::Result<()> {
    if !path.exists() {
        anyhow::bail!(
            "missing artifact {} — run the `{produced_by}` stage first",
            path.display()
        );
    }
    Ok(())
}
