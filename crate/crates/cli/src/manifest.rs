use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tbq_core::{Error, Result};

use crate::args::*;
use crate::run::{self, Ctx};

#[derive(Debug, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to reproduce one run.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Full parameter set with defaults filled in and inputs made absolute.
    pub params: Cmd,
    pub seed: Option<u64>,
    pub version: String,
    pub inputs: Vec<FileHash>,
    /// Paths relative to the output directory of the run.
    pub outputs: Vec<FileHash>,
    pub wall_time_s: f64,
}

pub fn sha256(p: &Path) -> Result<String> {
    let bytes = fs::read(p).map_err(|e| Error::invalid(format!("cannot read {}: {e}", p.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn command_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Space(SpaceCmd::Gen(_)) => "space gen",
        Cmd::Space(SpaceCmd::Validate(_)) => "space validate",
        Cmd::Dyadic(DyadicCmd::Build(_)) => "dyadic build",
        Cmd::Mc(McCmd::Boundary(_)) => "mc boundary",
        Cmd::Mc(McCmd::Badness(_)) => "mc badness",
        Cmd::Mc(McCmd::Cover(_)) => "mc cover",
        Cmd::Tb(TbCmd::Check(_)) => "tb check",
        Cmd::Corpus(_) => "corpus",
        Cmd::Report(_) => "report",
        Cmd::Replay(_) => "replay",
    }
}

/// Moves the directory part of `--out` into the output directory so every
/// written file is named relative to it.
fn normalise(cmd: &mut Cmd, out_dir: &Path) -> PathBuf {
    let Some(out) = run::out_mut(cmd) else { return out_dir.to_path_buf() };
    let full = out_dir.join(&*out);
    let dir = full.parent().map(Path::to_path_buf).unwrap_or_default();
    *out = PathBuf::from(full.file_name().unwrap_or_default());
    dir
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Runs `cmd` and writes its manifest next to the primary output.
pub fn run_recorded(mut cmd: Cmd, out_dir: &Path, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    run::map_inputs(&mut cmd, absolute);
    let dir = normalise(&mut cmd, out_dir);
    let ctx = Ctx { out_dir: dir.clone() };
    let inputs = run::inputs(&cmd).into_iter().map(|p| Ok(FileHash { sha256: sha256(&p)?, path: p })).collect::<Result<Vec<_>>>()?;
    let written = run::execute(&cmd, &ctx)?;
    let outputs = written
        .iter()
        .map(|p| Ok(FileHash { sha256: sha256(p)?, path: p.strip_prefix(&dir).unwrap_or(p).to_path_buf() }))
        .collect::<Result<Vec<_>>>()?;
    let primary = ctx.path(run::out_mut(&mut cmd).expect("recorded commands have an output"));
    let m = Manifest {
        command: command_name(&cmd).to_string(),
        argv,
        seed: run::seed(&cmd),
        params: cmd,
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs,
        outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let mut name = primary.into_os_string();
    name.push(".manifest.json");
    fs::write(PathBuf::from(name), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

/// Re-runs a manifest in a scratch directory and compares output hashes.
pub fn replay(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != env!("CARGO_PKG_VERSION") {
        log::warn!("manifest written by version {}, replaying with {}", m.version, env!("CARGO_PKG_VERSION"));
    }
    for f in &m.inputs {
        let now = sha256(&f.path)?;
        if now != f.sha256 {
            return Err(Error::invalid(format!("input {} changed since the manifest was written", f.path.display())));
        }
    }
    let scratch = tempfile::tempdir()?;
    let ctx = Ctx { out_dir: scratch.path().to_path_buf() };
    run::execute(&m.params, &ctx)?;
    for f in &m.outputs {
        let now = sha256(&ctx.path(&f.path))?;
        if now != f.sha256 {
            return Err(Error::violation("replay determinism", format!("{} differs", f.path.display())));
        }
    }
    Ok(m.outputs.len())
}
