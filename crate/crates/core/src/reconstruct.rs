//! Rebuilds the target tree from the base tree and a decoded package.
//!
//! Application is all-or-nothing: the new tree is assembled beside the
//! original and only handed back once its digest matches the package header.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::diffgen::{split_lines, Change, EditOps, OpKind};
use crate::fstree::{Digest, Entry, FileTree, RelPath, TreeError};
use crate::package::{MetadataEntry, UpdatePackage};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FileApplyError {
    #[error("edit script covers {script} original units but the file has {actual}")]
    UnitCount { script: u64, actual: u64 },

    #[error("insert run {run} has no segment")]
    SegmentUnderflow { run: usize },

    #[error("{unused} segment(s) left over after the last insert run")]
    SegmentOverflow { unused: usize },

    #[error("insert run {run} declares {declared} units but its segment holds {actual}")]
    SegmentShape {
        run: usize,
        declared: u64,
        actual: u64,
    },

    #[error("chunk lengths cover {declared} bytes but the file has {actual}")]
    ByteCount { declared: u64, actual: u64 },
}

#[derive(Debug, Error)]
pub enum ApplyError {
    #[error("package expects base {expected}, tree is {actual}")]
    BaseMismatch { expected: Digest, actual: Digest },

    #[error("{path}: {source}")]
    File {
        path: RelPath,
        #[source]
        source: FileApplyError,
    },

    #[error("{path}: {reason}")]
    Structure { path: RelPath, reason: String },

    #[error(transparent)]
    Tree(#[from] TreeError),

    #[error("reconstructed tree digest {actual} does not match expected {expected}")]
    Verification {
        expected: Digest,
        actual: Digest,
        report: Box<ApplyReport>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ApplyReport {
    pub files_added: usize,
    pub files_deleted: usize,
    pub files_patched: usize,
    pub dirs_added: usize,
    pub dirs_deleted: usize,
    pub verified: bool,
    /// On a digest mismatch, every path the package touched. The package
    /// carries only a whole-tree digest, so the culprit cannot be narrowed
    /// further.
    pub mismatch: Option<Vec<RelPath>>,
}

/// Replays `edit_ops` over `init_units` with a two-pointer walk: retains
/// copy units, deletes skip them, inserts splice the next segment. Inserts
/// consume no original units.
pub fn apply_file(
    init_units: &[&[u8]],
    edit_ops: &EditOps,
    seg_list: &[Vec<u8>],
) -> Result<Vec<u8>, FileApplyError> {
    let script = edit_ops.source_len();
    if script != init_units.len() as u64 {
        return Err(FileApplyError::UnitCount {
            script,
            actual: init_units.len() as u64,
        });
    }
    let runs = edit_ops.insert_runs();
    if seg_list.len() < runs {
        return Err(FileApplyError::SegmentUnderflow {
            run: seg_list.len(),
        });
    }
    if seg_list.len() > runs {
        return Err(FileApplyError::SegmentOverflow {
            unused: seg_list.len() - runs,
        });
    }

    let mut out = Vec::new();
    let mut index_init = 0usize;
    let mut index_seg = 0usize;
    for op in edit_ops.ops() {
        let n = op.count as usize;
        match op.kind {
            OpKind::Retain => {
                for unit in &init_units[index_init..index_init + n] {
                    out.extend_from_slice(unit);
                }
                index_init += n;
            }
            OpKind::Delete => index_init += n,
            OpKind::Insert => {
                out.extend_from_slice(&seg_list[index_seg]);
                index_seg += 1;
            }
        }
    }
    Ok(out)
}

/// Line-mode rebuild. Each inserted segment must split into exactly as many
/// lines as its run declares.
pub fn apply_textual(
    orig: &[u8],
    ops: &EditOps,
    segs: &[Vec<u8>],
) -> Result<Vec<u8>, FileApplyError> {
    let inserts = ops.ops().iter().filter(|o| o.kind == OpKind::Insert);
    for (run, (op, seg)) in inserts.zip(segs).enumerate() {
        let lines = split_lines(seg).len() as u64;
        if lines != op.count {
            return Err(FileApplyError::SegmentShape {
                run,
                declared: op.count,
                actual: lines,
            });
        }
    }
    apply_file(&split_lines(orig), ops, segs)
}

/// Chunk-mode rebuild. Original chunk boundaries come from the retained and
/// deleted runs' length annotations; the file is never re-chunked here.
pub fn apply_binary(
    orig: &[u8],
    ops: &EditOps,
    lengths: &[Vec<u64>],
    segs: &[Vec<u8>],
) -> Result<Vec<u8>, FileApplyError> {
    let declared: u64 = ops
        .ops()
        .iter()
        .zip(lengths)
        .filter(|(o, _)| o.kind != OpKind::Insert)
        .flat_map(|(_, l)| l.iter())
        .sum();
    if declared != orig.len() as u64 {
        return Err(FileApplyError::ByteCount {
            declared,
            actual: orig.len() as u64,
        });
    }
    let mut units = Vec::new();
    let mut offset = 0usize;
    for (op, lens) in ops.ops().iter().zip(lengths) {
        if op.kind == OpKind::Insert {
            continue;
        }
        for &l in lens {
            let l = l as usize;
            units.push(&orig[offset..offset + l]);
            offset += l;
        }
    }
    let inserts = ops
        .ops()
        .iter()
        .zip(lengths)
        .filter(|(o, _)| o.kind == OpKind::Insert);
    for (run, ((_, lens), seg)) in inserts.zip(segs).enumerate() {
        let want: u64 = lens.iter().sum();
        if want != seg.len() as u64 {
            return Err(FileApplyError::SegmentShape {
                run,
                declared: want,
                actual: seg.len() as u64,
            });
        }
    }
    apply_file(&units, ops, segs)
}

fn structure(path: &RelPath, reason: impl Into<String>) -> ApplyError {
    ApplyError::Structure {
        path: path.clone(),
        reason: reason.into(),
    }
}

/// Applies `pkg` to `orig`. On any error `orig` is left as it was and no
/// partial tree escapes.
pub fn apply_package(
    orig: &FileTree,
    pkg: &UpdatePackage,
) -> Result<(FileTree, ApplyReport), ApplyError> {
    let base = orig.digest();
    if base != pkg.header.source_digest {
        return Err(ApplyError::BaseMismatch {
            expected: pkg.header.source_digest,
            actual: base,
        });
    }

    let mut tree = orig.clone();
    let mut report = ApplyReport::default();

    let mut deletes = Vec::new();
    let mut inserts = Vec::new();
    let mut patches = Vec::new();
    for entry in &pkg.manifest {
        match entry {
            MetadataEntry::Directory { path, change } | MetadataEntry::File { path, change } => {
                let is_dir = matches!(entry, MetadataEntry::Directory { .. });
                match change {
                    Change::Delete => deletes.push((path, is_dir)),
                    Change::Insert => inserts.push((path, is_dir)),
                }
            }
            MetadataEntry::Textual { .. } | MetadataEntry::Binary { .. } => patches.push(entry),
        }
    }

    // Children before parents.
    deletes.sort_by(|a, b| b.0.cmp(a.0));
    for (path, is_dir) in deletes {
        match (tree.get(path), is_dir) {
            (Some(Entry::Directory), true) | (Some(Entry::File(_)), false) => {}
            (Some(_), _) => return Err(structure(path, "entry kind differs from manifest")),
            (None, _) => return Err(structure(path, "delete of missing entry")),
        }
        tree.remove_entry(path).map_err(|e| match e {
            TreeError::NotEmpty(_) => structure(
                path,
                "directory still has entries not deleted by the manifest",
            ),
            other => other.into(),
        })?;
        if is_dir {
            report.dirs_deleted += 1;
        } else {
            report.files_deleted += 1;
        }
    }

    // Parents before children.
    inserts.sort_by(|a, b| a.0.cmp(b.0));
    for (path, is_dir) in inserts {
        let entry = if is_dir {
            report.dirs_added += 1;
            Entry::Directory
        } else {
            report.files_added += 1;
            let payload = pkg
                .segments
                .get(path)
                .and_then(|s| s.first())
                .ok_or_else(|| structure(path, "inserted file has no payload"))?;
            Entry::File(crate::fstree::FileData::new(payload.clone()))
        };
        tree.insert_entry(path.clone(), entry)
            .map_err(|e| match e {
                TreeError::MissingParent(_) => {
                    structure(path, "parent directory is neither present nor inserted")
                }
                TreeError::Conflict { .. } => structure(path, "insert of an existing entry"),
                other => other.into(),
            })?;
    }

    let empty: Vec<Vec<u8>> = Vec::new();
    let rebuilt: Vec<(RelPath, Vec<u8>)> = patches
        .par_iter()
        .map(|entry| {
            let path = entry.path();
            let file = tree
                .file(path)
                .ok_or_else(|| structure(path, "patched file does not exist"))?;
            let segs = pkg.segments.get(path).unwrap_or(&empty);
            let out = match entry {
                MetadataEntry::Textual { ops, .. } => apply_textual(file.content(), ops, segs),
                MetadataEntry::Binary { ops, lengths, .. } => {
                    apply_binary(file.content(), ops, lengths, segs)
                }
                _ => unreachable!("only diff entries are patches"),
            };
            out.map(|c| (path.clone(), c))
                .map_err(|source| ApplyError::File {
                    path: path.clone(),
                    source,
                })
        })
        .collect::<Result<_, _>>()?;
    for (path, content) in rebuilt {
        tree.replace_file(&path, content)?;
        report.files_patched += 1;
    }

    let actual = tree.digest();
    if actual != pkg.header.target_digest {
        report.mismatch = Some(pkg.manifest.iter().map(|e| e.path().clone()).collect());
        return Err(ApplyError::Verification {
            expected: pkg.header.target_digest,
            actual,
            report: Box::new(report),
        });
    }
    report.verified = true;
    Ok((tree, report))
}
