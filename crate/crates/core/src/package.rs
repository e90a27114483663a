//! Update package wire format (`.satpkg`).
//!
//! The uncompressed body is laid out as follows, integers big-endian:
//!
//! ```text
//! magic            4   "SATL"
//! version          1   0x01
//! window_bytes     4
//! mask_bits        4
//! min_chunk_bytes  4
//! max_chunk_bytes  4
//! source digest   32   tree digest of the base version
//! target digest   32   tree digest of the updated version
//! manifest_len     4
//! manifest         manifest_len bytes of UTF-8, one entry per line
//! segment_count    4
//! segments         segment_count x { path_len u32, path, run u32, len u64, payload }
//! integrity       32   SHA-256 of every preceding body byte
//! ```
//!
//! Each manifest line is `TYPE\tPATH\tOPS\n`. `TYPE` is one of `D`
//! (directory), `F` (whole file), `T` (textual diff) or `B` (binary diff).
//! `PATH` is percent-encoded, leaving `A-Z a-z 0-9 - . _ ~ /` literal. For
//! `D` and `F` entries `OPS` is the single tag `I` or `D`. For `T` and `B` it
//! is a `;`-joined list of runs `(R|D|I)<count>`; `B` runs append
//! `,<len>` for each chunk they cover. Manifest order is all `D` entries,
//! then `F`, `T` and `B`, each sorted by path. Segments follow manifest order
//! and run index, and use the same path encoding.
//!
//! The body is gzip-compressed as a single member at level 9 with a fixed
//! header (no name, zero mtime, OS byte 255), so identical inputs always give
//! identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{self, Read, Write};

use flate2::{Compression, GzBuilder};
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::diffgen::{
    BinaryDiff, Change, ChangeSet, ChunkBoundarySpec, ChunkSpecError, EditOp, EditOps, OpKind,
    TextualDiff,
};
use crate::fstree::{Digest, FileTree, RelPath};

pub const MAGIC: &[u8; 4] = b"SATL";
pub const FORMAT_VERSION: u8 = 1;
pub const FILE_EXTENSION: &str = "satpkg";

/// Bytes before the manifest length field.
const FIXED_HEADER_LEN: usize = 4 + 1 + 16 + 32 + 32;
const INTEGRITY_LEN: usize = 32;

/// The ten gzip header bytes the encoder always writes.
const GZIP_HEADER: [u8; 10] = [0x1f, 0x8b, 0x08, 0x00, 0, 0, 0, 0, 0x02, 0xff];

const PATH_ESCAPES: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'.')
    .remove(b'_')
    .remove(b'~')
    .remove(b'/');

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("inconsistent change set at {path}: {reason}")]
    Inconsistent { path: RelPath, reason: String },

    #[error("not a package: bad magic")]
    BadMagic,

    #[error("unsupported package version {0}")]
    UnsupportedVersion(u8),

    #[error("package truncated at body offset {offset}")]
    Truncated { offset: usize },

    #[error("gzip header is not the canonical one")]
    GzipHeader,

    #[error("corrupt gzip stream: {0}")]
    Gzip(#[source] io::Error),

    #[error("{count} trailing byte(s) after package data")]
    TrailingBytes { count: usize },

    #[error("package integrity digest mismatch")]
    Integrity,

    #[error("invalid chunk parameters in header: {0}")]
    ChunkSpec(#[from] ChunkSpecError),

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("{path}: missing segment for insert run {run}")]
    MissingSegment { path: RelPath, run: u32 },

    #[error("{path}: unexpected segment {run}")]
    UnexpectedSegment { path: RelPath, run: u32 },

    #[error("segment table at body offset {offset}: {reason}")]
    Segment { offset: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackageHeader {
    pub version: u8,
    pub chunk_spec: ChunkBoundarySpec,
    pub source_digest: Digest,
    pub target_digest: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntryType {
    Directory,
    File,
    Textual,
    Binary,
}

impl EntryType {
    pub fn code(self) -> char {
        match self {
            EntryType::Directory => 'D',
            EntryType::File => 'F',
            EntryType::Textual => 'T',
            EntryType::Binary => 'B',
        }
    }

    fn from_code(s: &str) -> Option<Self> {
        match s {
            "D" => Some(EntryType::Directory),
            "F" => Some(EntryType::File),
            "T" => Some(EntryType::Textual),
            "B" => Some(EntryType::Binary),
            _ => None,
        }
    }
}

/// One `<Type, FilePath, EditOps>` manifest tuple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetadataEntry {
    Directory {
        path: RelPath,
        change: Change,
    },
    File {
        path: RelPath,
        change: Change,
    },
    Textual {
        path: RelPath,
        ops: EditOps,
    },
    Binary {
        path: RelPath,
        ops: EditOps,
        lengths: Vec<Vec<u64>>,
    },
}

impl MetadataEntry {
    pub fn entry_type(&self) -> EntryType {
        match self {
            MetadataEntry::Directory { .. } => EntryType::Directory,
            MetadataEntry::File { .. } => EntryType::File,
            MetadataEntry::Textual { .. } => EntryType::Textual,
            MetadataEntry::Binary { .. } => EntryType::Binary,
        }
    }

    pub fn path(&self) -> &RelPath {
        match self {
            MetadataEntry::Directory { path, .. }
            | MetadataEntry::File { path, .. }
            | MetadataEntry::Textual { path, .. }
            | MetadataEntry::Binary { path, .. } => path,
        }
    }

    /// Number of segments this entry owns in the segment store.
    pub fn expected_segments(&self) -> usize {
        match self {
            MetadataEntry::Directory { .. } => 0,
            MetadataEntry::File { change, .. } => usize::from(*change == Change::Insert),
            MetadataEntry::Textual { ops, .. } | MetadataEntry::Binary { ops, .. } => {
                ops.insert_runs()
            }
        }
    }

    fn ops_text(&self) -> String {
        let tag = |c: &Change| match c {
            Change::Insert => "I".to_owned(),
            Change::Delete => "D".to_owned(),
        };
        match self {
            MetadataEntry::Directory { change, .. } | MetadataEntry::File { change, .. } => {
                tag(change)
            }
            MetadataEntry::Textual { ops, .. } => ops
                .ops()
                .iter()
                .map(|o| o.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            MetadataEntry::Binary { ops, lengths, .. } => {
                let mut s = String::new();
                for (i, (op, lens)) in ops.ops().iter().zip(lengths).enumerate() {
                    if i > 0 {
                        s.push(';');
                    }
                    write!(s, "{op}").unwrap();
                    for l in lens {
                        write!(s, ",{l}").unwrap();
                    }
                }
                s
            }
        }
    }
}

/// Decoded (or about-to-be-encoded) update package.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdatePackage {
    pub header: PackageHeader,
    pub manifest: Vec<MetadataEntry>,
    pub segments: BTreeMap<RelPath, Vec<Vec<u8>>>,
}

impl UpdatePackage {
    /// Builds the package for `cs`, pulling whole-file payloads from `upd`.
    pub fn from_changeset(
        cs: &ChangeSet,
        orig: &FileTree,
        upd: &FileTree,
    ) -> Result<Self, PackageError> {
        let mut manifest = Vec::new();
        let mut segments: BTreeMap<RelPath, Vec<Vec<u8>>> = BTreeMap::new();

        for (path, change) in &cs.changed_dirs {
            manifest.push(MetadataEntry::Directory {
                path: path.clone(),
                change: *change,
            });
        }
        for (path, change) in &cs.changed_files {
            if *change == Change::Insert {
                let file = upd.file(path).ok_or_else(|| PackageError::Inconsistent {
                    path: path.clone(),
                    reason: "inserted file missing from updated tree".into(),
                })?;
                segments.insert(path.clone(), vec![file.content().to_vec()]);
            }
            manifest.push(MetadataEntry::File {
                path: path.clone(),
                change: *change,
            });
        }
        for (path, d) in &cs.textual_diffs {
            check_textual(path, d)?;
            if !d.segments.is_empty() {
                segments.insert(path.clone(), d.segments.clone());
            }
            manifest.push(MetadataEntry::Textual {
                path: path.clone(),
                ops: d.ops.clone(),
            });
        }
        for (path, d) in &cs.binary_diffs {
            check_binary(path, d)?;
            if !d.segments.is_empty() {
                segments.insert(path.clone(), d.segments.clone());
            }
            manifest.push(MetadataEntry::Binary {
                path: path.clone(),
                ops: d.ops.clone(),
                lengths: d.lengths.clone(),
            });
        }
        sort_manifest(&mut manifest);

        let pkg = UpdatePackage {
            header: PackageHeader {
                version: FORMAT_VERSION,
                chunk_spec: cs.chunk_spec,
                source_digest: orig.digest(),
                target_digest: upd.digest(),
            },
            manifest,
            segments,
        };
        pkg.validate()?;
        Ok(pkg)
    }

    /// Structural checks shared by the encoder and decoder.
    pub fn validate(&self) -> Result<(), PackageError> {
        self.header.chunk_spec.validate()?;
        let mut seen: BTreeMap<&RelPath, Vec<EntryType>> = BTreeMap::new();
        for entry in &self.manifest {
            let types = seen.entry(entry.path()).or_default();
            let ty = entry.entry_type();
            // A path may appear twice only as a directory/file kind change.
            let clash = types.contains(&ty)
                || matches!(ty, EntryType::Textual | EntryType::Binary) && !types.is_empty()
                || types
                    .iter()
                    .any(|t| matches!(t, EntryType::Textual | EntryType::Binary));
            if clash {
                return Err(PackageError::Inconsistent {
                    path: entry.path().clone(),
                    reason: "path listed more than once".into(),
                });
            }
            types.push(ty);

            let have = self.segments.get(entry.path()).map_or(0, Vec::len);
            let want = entry.expected_segments();
            if have < want {
                return Err(PackageError::MissingSegment {
                    path: entry.path().clone(),
                    run: have as u32,
                });
            }
            if have > want && want > 0 {
                return Err(PackageError::UnexpectedSegment {
                    path: entry.path().clone(),
                    run: want as u32,
                });
            }
            match entry {
                MetadataEntry::Textual { path, ops } => check_runs(path, ops)?,
                MetadataEntry::Binary { path, ops, lengths } => {
                    check_runs(path, ops)?;
                    check_lengths(path, ops, lengths)?;
                    let segs = &self.segments[path];
                    let inserts = ops
                        .ops()
                        .iter()
                        .zip(lengths)
                        .filter(|(o, _)| o.kind == OpKind::Insert);
                    for (run, (seg, (_, lens))) in segs.iter().zip(inserts).enumerate() {
                        if seg.len() as u64 != lens.iter().sum::<u64>() {
                            return Err(PackageError::Inconsistent {
                                path: path.clone(),
                                reason: format!(
                                    "segment {run} length disagrees with its chunk lengths"
                                ),
                            });
                        }
                    }
                }
                _ => {}
            }
        }
        for (path, segs) in &self.segments {
            let owned: usize = self
                .manifest
                .iter()
                .filter(|e| e.path() == path)
                .map(MetadataEntry::expected_segments)
                .sum();
            if segs.len() != owned {
                return Err(PackageError::UnexpectedSegment {
                    path: path.clone(),
                    run: owned as u32,
                });
            }
        }
        Ok(())
    }

    /// Serializes and compresses. Refuses inconsistent packages.
    pub fn encode(&self) -> Result<Vec<u8>, PackageError> {
        self.validate()?;
        Ok(compress_body(&self.body()))
    }

    /// Uncompressed body including the integrity trailer.
    fn body(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(h.version);
        for v in [
            h.chunk_spec.window_bytes,
            h.chunk_spec.boundary_mask_bits,
            h.chunk_spec.min_chunk_bytes,
            h.chunk_spec.max_chunk_bytes,
        ] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(h.source_digest.as_bytes());
        out.extend_from_slice(h.target_digest.as_bytes());

        let mut manifest = String::new();
        for e in &self.manifest {
            writeln!(
                manifest,
                "{}\t{}\t{}",
                e.entry_type().code(),
                encode_path(e.path()),
                e.ops_text()
            )
            .unwrap();
        }
        out.extend_from_slice(&(manifest.len() as u32).to_be_bytes());
        out.extend_from_slice(manifest.as_bytes());

        let order = self.segment_order();
        out.extend_from_slice(&(order.len() as u32).to_be_bytes());
        for (path, run) in order {
            let payload = &self.segments[path][run];
            let enc = encode_path(path);
            out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
            out.extend_from_slice(enc.as_bytes());
            out.extend_from_slice(&(run as u32).to_be_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_be_bytes());
            out.extend_from_slice(payload);
        }
        reseal(&mut out, false);
        out
    }

    fn segment_order(&self) -> Vec<(&RelPath, usize)> {
        let mut order = Vec::new();
        let mut done = BTreeSet::new();
        for e in &self.manifest {
            let path = e.path();
            if e.expected_segments() > 0 && done.insert(path) {
                let n = self.segments.get(path).map_or(0, Vec::len);
                order.extend((0..n).map(|i| (path, i)));
            }
        }
        order
    }

    /// Rebuilds the change set this package was encoded from. Whole-file
    /// payloads are not part of a change set and are dropped.
    pub fn to_changeset(&self) -> ChangeSet {
        let mut cs = ChangeSet::empty(self.header.chunk_spec);
        for e in &self.manifest {
            let segs = || self.segments.get(e.path()).cloned().unwrap_or_default();
            match e {
                MetadataEntry::Directory { path, change } => {
                    cs.changed_dirs.push((path.clone(), *change))
                }
                MetadataEntry::File { path, change } => {
                    cs.changed_files.push((path.clone(), *change))
                }
                MetadataEntry::Textual { path, ops } => {
                    cs.textual_diffs.insert(
                        path.clone(),
                        TextualDiff {
                            ops: ops.clone(),
                            segments: segs(),
                        },
                    );
                }
                MetadataEntry::Binary { path, ops, lengths } => {
                    cs.binary_diffs.insert(
                        path.clone(),
                        BinaryDiff {
                            ops: ops.clone(),
                            lengths: lengths.clone(),
                            segments: segs(),
                        },
                    );
                }
            }
        }
        cs
    }

    /// Total payload bytes in the segment store.
    pub fn segment_bytes(&self) -> u64 {
        self.segments
            .values()
            .flatten()
            .map(|s| s.len() as u64)
            .sum()
    }
}

fn sort_manifest(manifest: &mut [MetadataEntry]) {
    manifest.sort_by(|a, b| (a.entry_type(), a.path()).cmp(&(b.entry_type(), b.path())));
}

fn check_runs(path: &RelPath, ops: &EditOps) -> Result<(), PackageError> {
    if ops.is_canonical() {
        Ok(())
    } else {
        Err(PackageError::Inconsistent {
            path: path.clone(),
            reason: "edit runs must be positive and alternate in kind".into(),
        })
    }
}

fn check_lengths(path: &RelPath, ops: &EditOps, lengths: &[Vec<u64>]) -> Result<(), PackageError> {
    let bad = |reason: &str| {
        Err(PackageError::Inconsistent {
            path: path.clone(),
            reason: reason.into(),
        })
    };
    if lengths.len() != ops.len() {
        return bad("one chunk length list is required per run");
    }
    for (op, lens) in ops.ops().iter().zip(lengths) {
        if lens.len() as u64 != op.count {
            return bad("chunk length list does not match run count");
        }
        if lens.contains(&0) {
            return bad("zero-length chunk");
        }
    }
    Ok(())
}

fn check_textual(path: &RelPath, d: &TextualDiff) -> Result<(), PackageError> {
    if d.segments.len() != d.ops.insert_runs() {
        return Err(PackageError::Inconsistent {
            path: path.clone(),
            reason: format!(
                "{} insert runs but {} segments",
                d.ops.insert_runs(),
                d.segments.len()
            ),
        });
    }
    Ok(())
}

fn check_binary(path: &RelPath, d: &BinaryDiff) -> Result<(), PackageError> {
    if d.segments.len() != d.ops.insert_runs() {
        return Err(PackageError::Inconsistent {
            path: path.clone(),
            reason: format!(
                "{} insert runs but {} segments",
                d.ops.insert_runs(),
                d.segments.len()
            ),
        });
    }
    check_lengths(path, &d.ops, &d.lengths)
}

fn encode_path(path: &RelPath) -> String {
    utf8_percent_encode(path.as_str(), PATH_ESCAPES).to_string()
}

/// Decodes a wire path, accepting only the canonical encoding.
fn decode_path(s: &str) -> Result<RelPath, String> {
    let decoded = percent_decode_str(s)
        .decode_utf8()
        .map_err(|_| "path is not UTF-8".to_owned())?;
    let path = RelPath::new(&decoded).map_err(|e| e.to_string())?;
    if path.as_str() != decoded || encode_path(&path) != s {
        return Err(format!("non-canonical path encoding {s:?}"));
    }
    Ok(path)
}

/// Encodes the package for `changeset`.
pub fn encode_package(
    changeset: &ChangeSet,
    orig: &FileTree,
    upd: &FileTree,
) -> Result<Vec<u8>, PackageError> {
    UpdatePackage::from_changeset(changeset, orig, upd)?.encode()
}

/// Size of an encoded package in bytes.
pub fn package_size(pkg_bytes: &[u8]) -> u64 {
    pkg_bytes.len() as u64
}

/// Gzip with the fixed header used by every package.
pub fn compress_body(body: &[u8]) -> Vec<u8> {
    let mut enc = GzBuilder::new().write(Vec::new(), Compression::best());
    enc.write_all(body).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

/// Inverse of [`compress_body`]. Rejects non-canonical headers, CRC or
/// length failures, truncation and trailing data.
pub fn decompress_body(bytes: &[u8]) -> Result<Vec<u8>, PackageError> {
    if bytes.len() < GZIP_HEADER.len() {
        return Err(PackageError::Truncated { offset: 0 });
    }
    if bytes[..GZIP_HEADER.len()] != GZIP_HEADER {
        return Err(PackageError::GzipHeader);
    }
    let mut dec = flate2::bufread::GzDecoder::new(bytes);
    let mut body = Vec::new();
    dec.read_to_end(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => PackageError::Truncated { offset: body.len() },
        _ => PackageError::Gzip(e),
    })?;
    let rest = dec.into_inner();
    if !rest.is_empty() {
        return Err(PackageError::TrailingBytes { count: rest.len() });
    }
    Ok(body)
}

/// Recomputes the integrity trailer of `body`. With `replace` the last 32
/// bytes are taken to be an existing trailer; otherwise one is appended.
pub fn reseal(body: &mut Vec<u8>, replace: bool) {
    if replace {
        let keep = body.len().saturating_sub(INTEGRITY_LEN);
        body.truncate(keep);
    }
    let digest = Sha256::digest(&body[..]);
    body.extend_from_slice(&digest);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PackageError> {
        if self.buf.len() - self.pos < n {
            return Err(PackageError::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PackageError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PackageError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PackageError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn digest(&mut self) -> Result<Digest, PackageError> {
        Ok(Digest(self.take(32)?.try_into().unwrap()))
    }
}

/// Decodes and fully validates a package.
pub fn decode_package(bytes: &[u8]) -> Result<UpdatePackage, PackageError> {
    let body = decompress_body(bytes)?;
    decode_body(&body)
}

/// Decodes an already decompressed body.
pub fn decode_body(body: &[u8]) -> Result<UpdatePackage, PackageError> {
    let mut cur = Cursor { buf: body, pos: 0 };
    if cur.take(4).map_err(|_| PackageError::BadMagic)? != MAGIC {
        return Err(PackageError::BadMagic);
    }
    let version = cur.u8()?;
    if version != FORMAT_VERSION {
        return Err(PackageError::UnsupportedVersion(version));
    }
    if body.len() < FIXED_HEADER_LEN + INTEGRITY_LEN {
        return Err(PackageError::Truncated { offset: body.len() });
    }
    let (content, trailer) = body.split_at(body.len() - INTEGRITY_LEN);
    if Sha256::digest(content).as_slice() != trailer {
        return Err(PackageError::Integrity);
    }
    let mut cur = Cursor {
        buf: content,
        pos: cur.pos,
    };

    let chunk_spec = ChunkBoundarySpec {
        window_bytes: cur.u32()?,
        boundary_mask_bits: cur.u32()?,
        min_chunk_bytes: cur.u32()?,
        max_chunk_bytes: cur.u32()?,
    };
    chunk_spec.validate()?;
    let header = PackageHeader {
        version,
        chunk_spec,
        source_digest: cur.digest()?,
        target_digest: cur.digest()?,
    };

    let manifest_len = cur.u32()? as usize;
    let manifest_bytes = cur.take(manifest_len)?;
    let manifest_text =
        std::str::from_utf8(manifest_bytes).map_err(|e| PackageError::Manifest {
            line: 1 + manifest_bytes[..e.valid_up_to()]
                .iter()
                .filter(|&&b| b == b'\n')
                .count(),
            reason: "not UTF-8".into(),
        })?;
    let manifest = parse_manifest(manifest_text)?;

    let count = cur.u32()?;
    let mut segments: BTreeMap<RelPath, Vec<Vec<u8>>> = BTreeMap::new();
    let mut read_order = Vec::new();
    for _ in 0..count {
        let at = cur.pos;
        let path_len = cur.u32()? as usize;
        let raw = cur.take(path_len)?;
        let raw = std::str::from_utf8(raw).map_err(|_| PackageError::Segment {
            offset: at,
            reason: "path is not UTF-8".into(),
        })?;
        let path =
            decode_path(raw).map_err(|reason| PackageError::Segment { offset: at, reason })?;
        let run = cur.u32()?;
        let len = cur.u64()?;
        let len = usize::try_from(len).map_err(|_| PackageError::Truncated { offset: cur.pos })?;
        let payload = cur.take(len)?.to_vec();
        let list = segments.entry(path.clone()).or_default();
        if run as usize != list.len() {
            return Err(PackageError::UnexpectedSegment { path, run });
        }
        list.push(payload);
        read_order.push((path, run as usize));
    }
    if cur.pos != content.len() {
        return Err(PackageError::TrailingBytes {
            count: content.len() - cur.pos,
        });
    }

    let pkg = UpdatePackage {
        header,
        manifest,
        segments,
    };
    pkg.validate()?;
    let canonical = pkg.segment_order();
    if canonical.len() != read_order.len()
        || canonical
            .iter()
            .zip(&read_order)
            .any(|((p, r), (q, s))| *p != q || r != s)
    {
        return Err(PackageError::Segment {
            offset: cur.pos,
            reason: "segment table does not follow manifest order".into(),
        });
    }
    Ok(pkg)
}

fn parse_manifest(text: &str) -> Result<Vec<MetadataEntry>, PackageError> {
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(PackageError::Manifest {
            line: text.lines().count(),
            reason: "unterminated last line".into(),
        });
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let err = |reason: String| PackageError::Manifest {
            line: lineno,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [ty, path, ops] = fields[..] else {
            return Err(err(format!(
                "expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        };
        let ty =
            EntryType::from_code(ty).ok_or_else(|| err(format!("unknown entry type {ty:?}")))?;
        let path = decode_path(path).map_err(err)?;
        let entry = match ty {
            EntryType::Directory | EntryType::File => {
                let change = match ops {
                    "I" => Change::Insert,
                    "D" => Change::Delete,
                    other => return Err(err(format!("expected I or D tag, got {other:?}"))),
                };
                if ty == EntryType::Directory {
                    MetadataEntry::Directory { path, change }
                } else {
                    MetadataEntry::File { path, change }
                }
            }
            EntryType::Textual => {
                let (ops, lengths) = parse_runs(ops).map_err(err)?;
                if lengths.iter().any(|l| !l.is_empty()) {
                    return Err(err("textual runs carry no chunk lengths".into()));
                }
                MetadataEntry::Textual { path, ops }
            }
            EntryType::Binary => {
                let (ops, lengths) = parse_runs(ops).map_err(err)?;
                MetadataEntry::Binary { path, ops, lengths }
            }
        };
        out.push(entry);
    }
    let mut sorted = out.clone();
    sort_manifest(&mut sorted);
    if sorted != out {
        return Err(PackageError::Manifest {
            line: 0,
            reason: "entries are not in canonical order".into(),
        });
    }
    Ok(out)
}

fn parse_number(s: &str) -> Result<u64, String> {
    // Reject signs, leading zeros and empty strings so each value has one
    // spelling.
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0'))
    {
        return Err(format!("bad number {s:?}"));
    }
    s.parse().map_err(|_| format!("number out of range {s:?}"))
}

fn parse_runs(s: &str) -> Result<(EditOps, Vec<Vec<u64>>), String> {
    let mut runs = Vec::new();
    let mut lengths = Vec::new();
    if s.is_empty() {
        return Ok((EditOps::from_runs(runs), lengths));
    }
    for run in s.split(';') {
        let mut parts = run.split(',');
        let head = parts.next().unwrap_or_default();
        let mut chars = head.chars();
        let kind = chars
            .next()
            .and_then(OpKind::from_letter)
            .ok_or_else(|| format!("bad run {run:?}"))?;
        let count = parse_number(chars.as_str())?;
        runs.push(EditOp { kind, count });
        lengths.push(parts.map(parse_number).collect::<Result<Vec<_>, _>>()?);
    }
    Ok((EditOps::from_runs(runs), lengths))
}
