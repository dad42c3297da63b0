use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::commands::{out_dir, redirect, resolve_paths, run};
use crate::io::file_hash;
use crate::{CliError, Command, ReplayArgs, EXIT_ACCEPT, EXIT_DATA};

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub hash: String,
}

/// Written next to the outputs of every command run with an output directory.
/// Hashes are git blob ids under SHA-256.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub argv: Vec<String>,
    pub command: Command,
    pub resolved: Value,
    pub inputs: Vec<FileHash>,
    /// Keyed by file name.
    pub outputs: Vec<FileHash>,
    pub exit_code: u8,
}

fn hashes(paths: &[PathBuf], key: impl Fn(&Path) -> String) -> Result<Vec<FileHash>, CliError> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: key(p),
                hash: file_hash(p)?,
            })
        })
        .collect()
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn execute(mut cmd: Command, argv: Vec<String>, quiet: bool) -> Result<(u8, Option<Manifest>), CliError> {
    resolve_paths(&mut cmd)?;
    let outcome = run(&cmd)?;
    if let (Some(text), false) = (&outcome.stdout, quiet) {
        println!("{text}");
    }
    let Some(dir) = out_dir(&cmd) else {
        return Ok((outcome.code, None));
    };
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        argv,
        resolved: outcome.resolved,
        inputs: hashes(&outcome.inputs, |p| p.display().to_string())?,
        outputs: hashes(&outcome.outputs, file_name)?,
        exit_code: outcome.code,
        command: cmd.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok((outcome.code, Some(manifest)))
}

pub fn run_recorded(cmd: Command, argv: Vec<String>) -> Result<u8, CliError> {
    execute(cmd, argv, false).map(|(code, _)| code)
}

/// Re-runs the recorded command into a new directory. Fails with the data
/// exit code if an input changed or any output hash differs.
pub fn replay(args: &ReplayArgs) -> Result<u8, CliError> {
    let text =
        fs::read_to_string(&args.manifest).map_err(|e| CliError::usage(format!("{}: {e}", args.manifest.display())))?;
    let old: Manifest = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("manifest: {e}")))?;
    for f in &old.inputs {
        let now = file_hash(Path::new(&f.path))?;
        if now != f.hash {
            return Err(CliError::data(format!(
                "input {} changed since the recorded run",
                f.path
            )));
        }
    }
    let mut cmd = old.command;
    redirect(&mut cmd, args.out.clone());
    let argv = std::env::args().collect();
    let (code, new) = execute(cmd, argv, true)?;
    let new = new.ok_or_else(|| CliError::usage("the recorded command has no output directory"))?;
    let before: BTreeMap<&str, &str> = old.outputs.iter().map(|f| (f.path.as_str(), f.hash.as_str())).collect();
    let after: BTreeMap<&str, &str> = new.outputs.iter().map(|f| (f.path.as_str(), f.hash.as_str())).collect();
    let differing: Vec<&str> = before
        .keys()
        .chain(after.keys())
        .filter(|k| before.get(*k) != after.get(*k))
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if code != old.exit_code || !differing.is_empty() {
        return Err(CliError {
            code: EXIT_DATA,
            message: format!(
                "replay differs: exit code {} vs recorded {}; outputs differing: {:?}",
                code, old.exit_code, differing
            ),
        });
    }
    eprintln!("replay reproduced {} output files", after.len());
    Ok(EXIT_ACCEPT)
}
