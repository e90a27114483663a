//! Crash-safe output helpers and small input parsers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use satpatch_core::fstree::FileTree;
use satpatch_core::linksim::ContactWindow;

use crate::output::Failure;
use crate::EXIT_INPUT;

/// A sibling of `dest` that rename can move into place atomically.
fn staging_path(dest: &Path) -> Result<PathBuf> {
    let name = dest
        .file_name()
        .ok_or_else(|| anyhow!("{} has no file name", dest.display()))?;
    let mut staged = name.to_os_string();
    staged.push(format!(".tmp-{}", std::process::id()));
    Ok(dest.with_file_name(staged))
}

pub fn write_file_atomic(dest: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = staging_path(dest)?;
    let mut f =
        fs::File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, dest).with_context(|| format!("cannot move into {}", dest.display()))
}

/// Writes `tree` beside `dest`, then renames it into place.
pub fn materialize_atomic(tree: &FileTree, dest: &Path) -> Result<()> {
    let tmp = staging_path(dest)?;
    if tmp.exists() {
        fs::remove_dir_all(&tmp).with_context(|| format!("cannot clear {}", tmp.display()))?;
    }
    if let Err(e) = tree.materialize(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e.into());
    }
    fs::rename(&tmp, dest).with_context(|| format!("cannot move into {}", dest.display()))
}

fn parse_windows(text: &str) -> Result<Vec<ContactWindow>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [start, duration] = fields[..] else {
            bail!("line {}: expected `start_seconds duration_seconds`", n + 1);
        };
        out.push(ContactWindow {
            start_s: start
                .parse()
                .with_context(|| format!("line {}: bad start", n + 1))?,
            duration_s: duration
                .parse()
                .with_context(|| format!("line {}: bad duration", n + 1))?,
        });
    }
    Ok(out)
}

pub fn read_windows(path: &Path) -> Result<Vec<ContactWindow>, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .and_then(|t| parse_windows(&t).with_context(|| path.display().to_string()))
        .map_err(|e| Failure::new(EXIT_INPUT, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_file_format() {
        let w = parse_windows("# passes\n0 600\n\n7200 540 # second\n").unwrap();
        assert_eq!(
            w,
            vec![
                ContactWindow {
                    start_s: 0,
                    duration_s: 600
                },
                ContactWindow {
                    start_s: 7200,
                    duration_s: 540
                }
            ]
        );
        assert!(parse_windows("10\n").is_err());
        assert!(parse_windows("a b\n").is_err());
    }
}
