//! Hierarchical comparison of two file trees.
//!
//! Directories and files are first compared by presence. Files present on
//! both sides with differing content hashes are then diffed line by line when
//! both versions are textual, or chunk by chunk otherwise.

mod chunker;
mod myers;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use chunker::{chunkify, cut_points, Chunk, ChunkBoundarySpec, ChunkSpecError, RollingHash};

use crate::fstree::{FileData, FileTree, RelPath};

/// Retain, delete or insert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "R")]
    Retain,
    #[serde(rename = "D")]
    Delete,
    #[serde(rename = "I")]
    Insert,
}

impl OpKind {
    pub fn letter(self) -> char {
        match self {
            OpKind::Retain => 'R',
            OpKind::Delete => 'D',
            OpKind::Insert => 'I',
        }
    }

    pub fn from_letter(c: char) -> Option<OpKind> {
        match c {
            'R' => Some(OpKind::Retain),
            'D' => Some(OpKind::Delete),
            'I' => Some(OpKind::Insert),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: OpKind,
    pub count: u64,
}

impl fmt::Display for EditOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.letter(), self.count)
    }
}

/// Run-length edit script. Counts are positive and adjacent runs of the same
/// kind are always merged.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EditOps(Vec<EditOp>);

impl EditOps {
    pub fn new() -> Self {
        EditOps(Vec::new())
    }

    /// Appends a run, merging it into the previous one when kinds match.
    /// Zero-length runs are dropped.
    pub fn push(&mut self, kind: OpKind, count: u64) {
        if count == 0 {
            return;
        }
        match self.0.last_mut() {
            Some(last) if last.kind == kind => last.count += count,
            _ => self.0.push(EditOp { kind, count }),
        }
    }

    /// Builds from raw runs without merging; used by decoders that must
    /// preserve exactly what was on the wire.
    pub fn from_runs(runs: Vec<EditOp>) -> Self {
        EditOps(runs)
    }

    pub fn ops(&self) -> &[EditOp] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self, kind: OpKind) -> u64 {
        self.0
            .iter()
            .filter(|o| o.kind == kind)
            .map(|o| o.count)
            .sum()
    }

    /// Units consumed from the original sequence (R + D).
    pub fn source_len(&self) -> u64 {
        self.total(OpKind::Retain) + self.total(OpKind::Delete)
    }

    /// Units produced in the updated sequence (R + I).
    pub fn target_len(&self) -> u64 {
        self.total(OpKind::Retain) + self.total(OpKind::Insert)
    }

    /// D + I, the edit distance this script realizes.
    pub fn edit_cost(&self) -> u64 {
        self.total(OpKind::Delete) + self.total(OpKind::Insert)
    }

    pub fn insert_runs(&self) -> usize {
        self.0.iter().filter(|o| o.kind == OpKind::Insert).count()
    }

    /// True if counts are positive and no two neighbours share a kind.
    pub fn is_canonical(&self) -> bool {
        self.0.iter().all(|o| o.count > 0) && self.0.windows(2).all(|w| w[0].kind != w[1].kind)
    }
}

impl fmt::Display for EditOps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, op) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

/// Presence change of a directory or whole file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Change {
    Insert,
    Delete,
}

/// Line-level diff of a modified textual file. `segments[i]` holds the
/// concatenated lines of the i-th insert run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextualDiff {
    pub ops: EditOps,
    pub segments: Vec<Vec<u8>>,
}

/// Chunk-level diff of a modified binary file.
///
/// `lengths[i]` lists the byte length of every chunk covered by `ops[i]`, so
/// the receiver can walk the original without re-chunking it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDiff {
    pub ops: EditOps,
    pub lengths: Vec<Vec<u64>>,
    pub segments: Vec<Vec<u8>>,
}

impl BinaryDiff {
    /// Bytes carried over from the original file.
    pub fn retained_bytes(&self) -> u64 {
        self.ops
            .ops()
            .iter()
            .zip(&self.lengths)
            .filter(|(op, _)| op.kind == OpKind::Retain)
            .flat_map(|(_, l)| l.iter())
            .sum()
    }

    /// Size of the updated file implied by the annotations.
    pub fn target_bytes(&self) -> u64 {
        self.ops
            .ops()
            .iter()
            .zip(&self.lengths)
            .filter(|(op, _)| op.kind != OpKind::Delete)
            .flat_map(|(_, l)| l.iter())
            .sum()
    }
}

/// Everything that differs between two trees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeSet {
    pub chunk_spec: ChunkBoundarySpec,
    pub changed_dirs: Vec<(RelPath, Change)>,
    pub changed_files: Vec<(RelPath, Change)>,
    pub textual_diffs: BTreeMap<RelPath, TextualDiff>,
    pub binary_diffs: BTreeMap<RelPath, BinaryDiff>,
}

impl ChangeSet {
    pub fn empty(chunk_spec: ChunkBoundarySpec) -> Self {
        ChangeSet {
            chunk_spec,
            changed_dirs: Vec::new(),
            changed_files: Vec::new(),
            textual_diffs: BTreeMap::new(),
            binary_diffs: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.changed_dirs.is_empty()
            && self.changed_files.is_empty()
            && self.textual_diffs.is_empty()
            && self.binary_diffs.is_empty()
    }

    /// Paths whose new content has to be shipped: inserted and modified files.
    pub fn files_with_new_content(&self) -> Vec<&RelPath> {
        let mut v: Vec<&RelPath> = self
            .changed_files
            .iter()
            .filter(|(_, c)| *c == Change::Insert)
            .map(|(p, _)| p)
            .chain(self.textual_diffs.keys())
            .chain(self.binary_diffs.keys())
            .collect();
        v.sort();
        v
    }
}

/// Splits after every `\n`, keeping the terminator. A trailing fragment
/// without a newline is its own line.
pub fn split_lines(content: &[u8]) -> Vec<&[u8]> {
    content.split_inclusive(|&b| b == b'\n').collect()
}

fn script_from_matches<T>(
    old: &[T],
    new: &[T],
    matches: &[myers::Match],
) -> (EditOps, Vec<std::ops::Range<usize>>) {
    let mut ops = EditOps::new();
    let mut inserted = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    let tail = myers::Match {
        old: old.len(),
        new: new.len(),
        len: 0,
    };
    for m in matches.iter().chain(std::iter::once(&tail)) {
        ops.push(OpKind::Delete, (m.old - i) as u64);
        if m.new > j {
            ops.push(OpKind::Insert, (m.new - j) as u64);
            inserted.push(j..m.new);
        }
        ops.push(OpKind::Retain, m.len as u64);
        i = m.old + m.len;
        j = m.new + m.len;
    }
    (ops, inserted)
}

/// Minimal line edit script plus the inserted segments, one per insert run.
/// Within a changed region deletions are emitted before insertions.
pub fn line_diff(orig_lines: &[&[u8]], upd_lines: &[&[u8]]) -> TextualDiff {
    let matches = myers::matches(orig_lines, upd_lines);
    let (ops, inserted) = script_from_matches(orig_lines, upd_lines, &matches);
    let segments = inserted
        .into_iter()
        .map(|r| upd_lines[r].concat())
        .collect();
    TextualDiff { ops, segments }
}

/// Chunk-level edit script over the chunk hash sequences.
pub fn chunk_diff(orig: &[Chunk<'_>], upd: &[Chunk<'_>]) -> BinaryDiff {
    let a: Vec<_> = orig.iter().map(|c| c.hash).collect();
    let b: Vec<_> = upd.iter().map(|c| c.hash).collect();
    let matches = myers::matches(&a, &b);
    let (ops, inserted) = script_from_matches(&a, &b, &matches);

    let mut lengths = Vec::with_capacity(ops.len());
    let (mut i, mut j) = (0usize, 0usize);
    for op in ops.ops() {
        let n = op.count as usize;
        let lens = match op.kind {
            OpKind::Retain => {
                let l = orig[i..i + n].iter().map(|c| c.len() as u64).collect();
                i += n;
                j += n;
                l
            }
            OpKind::Delete => {
                let l = orig[i..i + n].iter().map(|c| c.len() as u64).collect();
                i += n;
                l
            }
            OpKind::Insert => {
                let l = upd[j..j + n].iter().map(|c| c.len() as u64).collect();
                j += n;
                l
            }
        };
        lengths.push(lens);
    }
    let segments = inserted
        .into_iter()
        .map(|r| {
            upd[r]
                .iter()
                .flat_map(|c| c.bytes.iter().copied())
                .collect()
        })
        .collect();
    BinaryDiff {
        ops,
        lengths,
        segments,
    }
}

/// Diff outcome for one modified file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileDiff {
    Textual(TextualDiff),
    Binary(BinaryDiff),
}

impl FileDiff {
    /// Bytes of the updated file that were retained from the original.
    pub fn retained_bytes(&self, orig: &[u8]) -> u64 {
        match self {
            FileDiff::Textual(d) => {
                let lines = split_lines(orig);
                let mut pos = 0usize;
                let mut kept = 0u64;
                for op in d.ops.ops() {
                    let n = op.count as usize;
                    match op.kind {
                        OpKind::Retain => {
                            kept += lines[pos..pos + n]
                                .iter()
                                .map(|l| l.len() as u64)
                                .sum::<u64>();
                            pos += n;
                        }
                        OpKind::Delete => pos += n,
                        OpKind::Insert => {}
                    }
                }
                kept
            }
            FileDiff::Binary(d) => d.retained_bytes(),
        }
    }
}

/// Diffs one modified file: lines if both versions are textual, chunks
/// otherwise.
pub fn diff_file(orig: &FileData, upd: &FileData, spec: &ChunkBoundarySpec) -> FileDiff {
    if orig.is_textual() && upd.is_textual() {
        let a = split_lines(orig.content());
        let b = split_lines(upd.content());
        FileDiff::Textual(line_diff(&a, &b))
    } else {
        let a = chunkify(orig.content(), spec);
        let b = chunkify(upd.content(), spec);
        FileDiff::Binary(chunk_diff(&a, &b))
    }
}

/// Compares two trees with the default chunking parameters.
pub fn compare_trees(orig: &FileTree, upd: &FileTree) -> ChangeSet {
    compare_trees_with(orig, upd, &ChunkBoundarySpec::default())
}

/// Compares two trees. A path that changes kind shows up as a delete of the
/// old kind plus an insert of the new one.
pub fn compare_trees_with(orig: &FileTree, upd: &FileTree, spec: &ChunkBoundarySpec) -> ChangeSet {
    use crate::fstree::Entry;

    let mut cs = ChangeSet::empty(*spec);
    let mut modified: Vec<(&RelPath, &FileData, &FileData)> = Vec::new();

    for (path, entry) in orig.entries() {
        match (entry, upd.get(path)) {
            (Entry::Directory, Some(Entry::Directory)) => {}
            (Entry::File(a), Some(Entry::File(b))) => {
                if a.hash() != b.hash() {
                    modified.push((path, a, b));
                }
            }
            (Entry::Directory, _) => cs.changed_dirs.push((path.clone(), Change::Delete)),
            (Entry::File(_), _) => cs.changed_files.push((path.clone(), Change::Delete)),
        }
    }
    for (path, entry) in upd.entries() {
        let same_kind = orig.get(path).is_some_and(|e| e.kind() == entry.kind());
        if same_kind {
            continue;
        }
        match entry {
            Entry::Directory => cs.changed_dirs.push((path.clone(), Change::Insert)),
            Entry::File(_) => cs.changed_files.push((path.clone(), Change::Insert)),
        }
    }
    cs.changed_dirs.sort_by(|a, b| a.0.cmp(&b.0));
    cs.changed_files.sort_by(|a, b| a.0.cmp(&b.0));

    let diffs: Vec<(RelPath, FileDiff)> = modified
        .par_iter()
        .map(|(p, a, b)| ((*p).clone(), diff_file(a, b, spec)))
        .collect();
    for (path, diff) in diffs {
        match diff {
            FileDiff::Textual(d) => {
                cs.textual_diffs.insert(path, d);
            }
            FileDiff::Binary(d) => {
                cs.binary_diffs.insert(path, d);
            }
        }
    }
    cs
}
