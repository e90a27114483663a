//! In-memory model of an unpacked application image.
//!
//! A [`FileTree`] maps normalized relative paths to directories and files.
//! Entries iterate in byte-lexicographic path order, which is what the tree
//! digest, the differ and the package encoder all rely on for determinism.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

/// Number of leading bytes inspected by [`classify_textual`].
pub const TEXT_SNIFF_LEN: usize = 8192;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("invalid path {path:?}: {reason}")]
    InvalidPath { path: String, reason: &'static str },

    #[error("path escapes the tree root: {0:?}")]
    PathEscape(String),

    #[error("{path}: already exists as a {existing}")]
    Conflict {
        path: RelPath,
        existing: &'static str,
    },

    #[error("{0}: no such entry")]
    NotFound(RelPath),

    #[error("{0}: parent directory does not exist")]
    MissingParent(RelPath),

    #[error("{0}: directory is not empty")]
    NotEmpty(RelPath),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("destination {} is not empty", .0.display())]
    DestinationNotEmpty(PathBuf),
}

impl TreeError {
    fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        TreeError::Io {
            path: path.into(),
            source,
        }
    }
}

/// SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut out)?;
        Ok(Digest(out))
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// SHA-256 of `content`. Both sides of the link must agree on this choice.
pub fn hash_content(content: &[u8]) -> Digest {
    Digest(Sha256::digest(content).into())
}

/// True when the first [`TEXT_SNIFF_LEN`] bytes hold no NUL and decode as
/// UTF-8, tolerating a code point cut off at the end of the inspected prefix.
pub fn classify_textual(content: &[u8]) -> bool {
    let prefix = &content[..content.len().min(TEXT_SNIFF_LEN)];
    if prefix.contains(&0) {
        return false;
    }
    match std::str::from_utf8(prefix) {
        Ok(_) => true,
        // `error_len() == None` means the input ended mid-sequence.
        Err(e) => e.error_len().is_none(),
    }
}

/// Normalized relative path: `/`-separated, non-empty UTF-8 segments, none of
/// which is `.` or `..`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RelPath(String);

impl RelPath {
    /// Normalizes `raw`: leading `/`, empty segments and `.` segments are
    /// dropped; `..` is rejected outright.
    pub fn new(raw: &str) -> Result<Self, TreeError> {
        let invalid = |reason| TreeError::InvalidPath {
            path: raw.to_owned(),
            reason,
        };
        if raw.contains('\0') {
            return Err(invalid("contains NUL"));
        }
        let mut segments = Vec::new();
        for seg in raw.split('/') {
            match seg {
                "" | "." => continue,
                ".." => return Err(TreeError::PathEscape(raw.to_owned())),
                s => segments.push(s),
            }
        }
        if segments.is_empty() {
            return Err(invalid("empty after normalization"));
        }
        Ok(RelPath(segments.join("/")))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    pub fn file_name(&self) -> &str {
        self.0.rsplit('/').next().unwrap_or(&self.0)
    }

    pub fn parent(&self) -> Option<RelPath> {
        self.0.rfind('/').map(|i| RelPath(self.0[..i].to_owned()))
    }

    /// All proper ancestors, outermost first.
    pub fn ancestors(&self) -> Vec<RelPath> {
        self.0
            .match_indices('/')
            .map(|(i, _)| RelPath(self.0[..i].to_owned()))
            .collect()
    }

    pub fn join(&self, segment: &str) -> Result<RelPath, TreeError> {
        RelPath::new(&format!("{}/{}", self.0, segment))
    }

    /// True if `self` equals `prefix` or lies beneath it.
    pub fn starts_with(&self, prefix: &RelPath) -> bool {
        self.0 == prefix.0
            || (self.0.starts_with(&prefix.0) && self.0.as_bytes()[prefix.0.len()] == b'/')
    }

    pub fn to_path_buf(&self) -> PathBuf {
        self.segments().collect()
    }
}

impl fmt::Display for RelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for RelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl FromStr for RelPath {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RelPath::new(s)
    }
}

impl TryFrom<String> for RelPath {
    type Error = TreeError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        RelPath::new(&s)
    }
}

impl From<RelPath> for String {
    fn from(p: RelPath) -> String {
        p.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Directory,
    File,
}

impl EntryKind {
    fn describe(self) -> &'static str {
        match self {
            EntryKind::Directory => "directory",
            EntryKind::File => "file",
        }
    }
}

/// Immutable file payload with its precomputed hash and classification.
#[derive(Clone, PartialEq, Eq)]
pub struct FileData {
    content: Arc<[u8]>,
    hash: Digest,
    textual: bool,
}

impl FileData {
    pub fn new(content: impl Into<Arc<[u8]>>) -> Self {
        let content = content.into();
        FileData {
            hash: hash_content(&content),
            textual: classify_textual(&content),
            content,
        }
    }

    pub fn content(&self) -> &[u8] {
        &self.content
    }

    pub fn hash(&self) -> Digest {
        self.hash
    }

    pub fn is_textual(&self) -> bool {
        self.textual
    }

    pub fn len(&self) -> usize {
        self.content.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content.is_empty()
    }
}

impl fmt::Debug for FileData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FileData")
            .field("len", &self.content.len())
            .field("hash", &self.hash)
            .field("textual", &self.textual)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Entry {
    Directory,
    File(FileData),
}

impl Entry {
    pub fn kind(&self) -> EntryKind {
        match self {
            Entry::Directory => EntryKind::Directory,
            Entry::File(_) => EntryKind::File,
        }
    }

    pub fn as_file(&self) -> Option<&FileData> {
        match self {
            Entry::File(f) => Some(f),
            Entry::Directory => None,
        }
    }
}

/// Normalized file tree. Cloning is cheap: file contents are shared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileTree {
    root_label: String,
    entries: BTreeMap<RelPath, Entry>,
}

impl FileTree {
    pub fn new(root_label: impl Into<String>) -> Self {
        FileTree {
            root_label: root_label.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn root_label(&self) -> &str {
        &self.root_label
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, path: &RelPath) -> Option<&Entry> {
        self.entries.get(path)
    }

    pub fn file(&self, path: &RelPath) -> Option<&FileData> {
        self.entries.get(path).and_then(Entry::as_file)
    }

    pub fn contains(&self, path: &RelPath) -> bool {
        self.entries.contains_key(path)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&RelPath, &Entry)> {
        self.entries.iter()
    }

    pub fn files(&self) -> impl Iterator<Item = (&RelPath, &FileData)> {
        self.entries
            .iter()
            .filter_map(|(p, e)| e.as_file().map(|f| (p, f)))
    }

    pub fn directories(&self) -> impl Iterator<Item = &RelPath> {
        self.entries
            .iter()
            .filter(|(_, e)| matches!(e, Entry::Directory))
            .map(|(p, _)| p)
    }

    /// Sum of all file sizes in bytes.
    pub fn total_file_bytes(&self) -> u64 {
        self.files().map(|(_, f)| f.len() as u64).sum()
    }

    /// Adds a directory and any missing ancestors. Idempotent for directories.
    pub fn add_dir(&mut self, path: RelPath) -> Result<(), TreeError> {
        for dir in path.ancestors().into_iter().chain(std::iter::once(path)) {
            match self.entries.get(&dir) {
                Some(Entry::Directory) => {}
                Some(Entry::File(_)) => {
                    return Err(TreeError::Conflict {
                        path: dir,
                        existing: "file",
                    })
                }
                None => {
                    self.entries.insert(dir, Entry::Directory);
                }
            }
        }
        Ok(())
    }

    /// Adds or replaces a file, creating missing ancestors.
    pub fn add_file(
        &mut self,
        path: RelPath,
        content: impl Into<Arc<[u8]>>,
    ) -> Result<(), TreeError> {
        if let Some(parent) = path.parent() {
            self.add_dir(parent)?;
        }
        if let Some(Entry::Directory) = self.entries.get(&path) {
            return Err(TreeError::Conflict {
                path,
                existing: "directory",
            });
        }
        self.entries
            .insert(path, Entry::File(FileData::new(content)));
        Ok(())
    }

    /// Inserts a single entry whose parent must already exist.
    pub fn insert_entry(&mut self, path: RelPath, entry: Entry) -> Result<(), TreeError> {
        if let Some(existing) = self.entries.get(&path) {
            return Err(TreeError::Conflict {
                path,
                existing: existing.kind().describe(),
            });
        }
        if let Some(parent) = path.parent() {
            if !matches!(self.entries.get(&parent), Some(Entry::Directory)) {
                return Err(TreeError::MissingParent(path));
            }
        }
        self.entries.insert(path, entry);
        Ok(())
    }

    /// Replaces the content of an existing file.
    pub fn replace_file(
        &mut self,
        path: &RelPath,
        content: impl Into<Arc<[u8]>>,
    ) -> Result<(), TreeError> {
        match self.entries.get_mut(path) {
            Some(e @ Entry::File(_)) => {
                *e = Entry::File(FileData::new(content));
                Ok(())
            }
            Some(Entry::Directory) => Err(TreeError::Conflict {
                path: path.clone(),
                existing: "directory",
            }),
            None => Err(TreeError::NotFound(path.clone())),
        }
    }

    /// Removes one entry. Directories must already be empty.
    pub fn remove_entry(&mut self, path: &RelPath) -> Result<Entry, TreeError> {
        match self.entries.get(path) {
            None => return Err(TreeError::NotFound(path.clone())),
            Some(Entry::Directory) if self.has_children(path) => {
                return Err(TreeError::NotEmpty(path.clone()))
            }
            Some(_) => {}
        }
        Ok(self.entries.remove(path).expect("checked above"))
    }

    fn has_children(&self, dir: &RelPath) -> bool {
        let prefix = format!("{}/", dir.as_str());
        self.entries
            .range(dir.clone()..)
            .skip(1)
            .take_while(|(p, _)| p.as_str().starts_with(dir.as_str()))
            .any(|(p, _)| p.as_str().starts_with(&prefix))
    }

    /// Digest over the `(path, kind, content hash)` triples in path order.
    ///
    /// Each entry contributes `path bytes || 0x00 || kind`, where kind is
    /// `b'd'` for a directory or `b'f'` followed by the 32-byte content hash
    /// for a file.
    pub fn digest(&self) -> Digest {
        let mut h = Sha256::new();
        for (path, entry) in &self.entries {
            h.update(path.as_str().as_bytes());
            h.update([0u8]);
            match entry {
                Entry::Directory => h.update(b"d"),
                Entry::File(f) => {
                    h.update(b"f");
                    h.update(f.hash.as_bytes());
                }
            }
        }
        Digest(h.finalize().into())
    }

    /// Loads a directory or, if `source` is a regular file, a tar archive.
    pub fn load(source: &Path) -> Result<FileTree, TreeError> {
        let meta = fs::metadata(source).map_err(|e| TreeError::io(source, e))?;
        if meta.is_dir() {
            Self::load_dir(source)
        } else {
            let f = fs::File::open(source).map_err(|e| TreeError::io(source, e))?;
            Self::load_tar(io::BufReader::new(f), source.display().to_string())
        }
    }

    /// Walks `root` without following symlinks. Anything that is neither a
    /// regular file nor a directory is skipped.
    pub fn load_dir(root: &Path) -> Result<FileTree, TreeError> {
        let mut tree = FileTree::new(root.display().to_string());
        for entry in WalkDir::new(root).min_depth(1).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                let path = e.path().unwrap_or(root).to_path_buf();
                TreeError::io(path, e.into())
            })?;
            let rel = entry
                .path()
                .strip_prefix(root)
                .expect("walkdir yields children of root");
            let rel_str = rel.to_str().ok_or_else(|| TreeError::InvalidPath {
                path: rel.to_string_lossy().into_owned(),
                reason: "not valid UTF-8",
            })?;
            let path = RelPath::new(rel_str)?;
            let ft = entry.file_type();
            if ft.is_dir() {
                tree.add_dir(path)?;
            } else if ft.is_file() {
                let content = fs::read(entry.path()).map_err(|e| TreeError::io(entry.path(), e))?;
                tree.add_file(path, content)?;
            }
        }
        Ok(tree)
    }

    /// Reads an uncompressed tar stream. Missing parent directories are
    /// created implicitly; links and special files are skipped.
    pub fn load_tar<R: Read>(reader: R, label: impl Into<String>) -> Result<FileTree, TreeError> {
        let label = label.into();
        let mut tree = FileTree::new(label.clone());
        let mut archive = tar::Archive::new(reader);
        let entries = archive.entries().map_err(|e| TreeError::io(&label, e))?;
        for entry in entries {
            let mut entry = entry.map_err(|e| TreeError::io(&label, e))?;
            let raw = entry.path_bytes().into_owned();
            let raw = String::from_utf8(raw).map_err(|e| TreeError::InvalidPath {
                path: String::from_utf8_lossy(e.as_bytes()).into_owned(),
                reason: "not valid UTF-8",
            })?;
            let path = match RelPath::new(&raw) {
                Ok(p) => p,
                // "./" style root entries carry nothing.
                Err(TreeError::InvalidPath { .. })
                    if raw.split('/').all(|s| s.is_empty() || s == ".") =>
                {
                    continue
                }
                Err(e) => return Err(e),
            };
            let kind = entry.header().entry_type();
            if kind.is_dir() {
                tree.add_dir(path)?;
            } else if kind.is_file() {
                let mut content = Vec::with_capacity(entry.size() as usize);
                entry
                    .read_to_end(&mut content)
                    .map_err(|e| TreeError::io(&label, e))?;
                tree.add_file(path, content)?;
            }
        }
        Ok(tree)
    }

    /// Writes the tree beneath `dest`, which must be absent or empty.
    pub fn materialize(&self, dest: &Path) -> Result<(), TreeError> {
        if dest.exists() {
            let mut rd = fs::read_dir(dest).map_err(|e| TreeError::io(dest, e))?;
            if rd.next().is_some() {
                return Err(TreeError::DestinationNotEmpty(dest.to_path_buf()));
            }
        } else {
            fs::create_dir_all(dest).map_err(|e| TreeError::io(dest, e))?;
        }
        for (path, entry) in &self.entries {
            let target = dest.join(path.to_path_buf());
            match entry {
                Entry::Directory => fs::create_dir(&target),
                Entry::File(f) => fs::write(&target, f.content()),
            }
            .map_err(|e| TreeError::io(&target, e))?;
        }
        Ok(())
    }

    /// Restricts the tree to `prefix` and everything beneath it.
    pub fn subtree(&self, prefix: &RelPath) -> FileTree {
        let mut out = FileTree::new(format!("{}:{}", self.root_label, prefix));
        for ancestor in prefix.ancestors() {
            if self.contains(&ancestor) {
                out.entries.insert(ancestor, Entry::Directory);
            }
        }
        out.entries.extend(
            self.entries
                .iter()
                .filter(|(p, _)| p.starts_with(prefix))
                .map(|(p, e)| (p.clone(), e.clone())),
        );
        out
    }
}
