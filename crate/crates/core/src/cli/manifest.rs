use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coeffs::{CoefficientOptions, DEGENERATE_TOL, ROUTE_TOL};
use crate::error::Result;
use crate::montecarlo::{CHUNK_SAMPLES, ROUNDOFF_FLOOR, SIGMA_LEVEL};
use crate::rotgeom::{DEFAULT_POLAR_TOL, ROTATION_TOL};
use crate::strongform::{DEFAULT_DELTA, DEFAULT_FD_STEP};

/// Provenance record written next to every output file as `<out>.manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Command arguments after defaults were filled in.
    pub config: serde_json::Value,
    /// Tolerances and numerical defaults in effect.
    pub defaults: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub threads: usize,
    /// Seconds since the Unix epoch at start.
    pub started_at: u64,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = std::fs::read(path)?;
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

pub(crate) fn resolved_solver_config(n: usize, options: &CoefficientOptions) -> serde_json::Value {
    serde_json::json!({
        "n": n,
        "degree": options.solver.degree,
        "nq": options.solver.nq,
        "error_estimate": options.error_estimate,
    })
}

fn defaults() -> serde_json::Value {
    serde_json::json!({
        "strong_form_delta": DEFAULT_DELTA,
        "strong_form_fd_step": DEFAULT_FD_STEP,
        "polar_tol": DEFAULT_POLAR_TOL,
        "rotation_tol": ROTATION_TOL,
        "route_tol": ROUTE_TOL,
        "degenerate_tol": DEGENERATE_TOL,
        "mc_sigma_level": SIGMA_LEVEL,
        "mc_roundoff_floor": ROUNDOFF_FLOOR,
        "mc_chunk_samples": CHUNK_SAMPLES,
    })
}

impl RunManifest {
    pub fn build(
        command: &str,
        config: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        threads: Option<usize>,
        started: Instant,
    ) -> Result<Self> {
        let started_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
            .saturating_sub(started.elapsed().as_secs());
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            defaults: defaults(),
            inputs: inputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
            threads: threads.unwrap_or_else(rayon::current_num_threads),
            started_at,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// `<out>.manifest.json`.
    pub fn path_for(out: &Path) -> PathBuf {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    pub fn write_next_to(&self, out: &Path) -> Result<()> {
        std::fs::write(Self::path_for(out), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
