//! Uplink model: transmission latency, modification ratio, baseline upload
//! sizes and contact-window scheduling.
//!
//! Sizes are reported in KB of 1024 bytes. Latencies are exact rationals
//! until they are rounded half-up to hundredths for display.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::diffgen::{diff_file, ChangeSet, ChunkBoundarySpec};
use crate::fstree::{Entry, FileTree, RelPath};
use crate::package::compress_body;

pub const DEFAULT_BANDWIDTH_BPS: u64 = 200_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("bandwidth must be positive")]
    ZeroBandwidth,
    #[error("contact window {index} has zero duration")]
    EmptyWindow { index: usize },
    #[error("contact window {index} starts before window {} ends", index - 1)]
    Overlap { index: usize },
    #[error("no contact windows configured")]
    NoWindows,
    #[error("application prefix {0:?} matches nothing in the updated tree")]
    EmptyPrefix(String),
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Rounds `num / den` to the nearest integer, halves rounding up.
fn div_half_up(num: u128, den: u128) -> u128 {
    (2 * num + den) / (2 * den)
}

/// Writes `centis` hundredths as `1,234.56`.
pub fn format_centis(centis: u128) -> String {
    let whole = (centis / 100).to_string();
    let mut grouped = String::with_capacity(whole.len() + whole.len() / 3);
    for (i, c) in whole.chars().enumerate() {
        if i > 0 && (whole.len() - i).is_multiple_of(3) {
            grouped.push(',');
        }
        grouped.push(c);
    }
    format!("{grouped}.{:02}", centis % 100)
}

/// A byte count with hundredth-of-a-byte resolution, so that sizes quoted as
/// two-decimal KB values convert without loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct DataSize {
    centibytes: u128,
}

impl DataSize {
    pub fn from_bytes(bytes: u64) -> Self {
        DataSize {
            centibytes: bytes as u128 * 100,
        }
    }

    /// `centis` hundredths of a KB: `from_kb_centis(4864)` is 48.64 KB.
    pub fn from_kb_centis(centis: u64) -> Self {
        DataSize {
            centibytes: centis as u128 * 1024,
        }
    }

    /// Parses a decimal KB figure such as `188,845.50` or `1.35`.
    pub fn parse_kb(s: &str) -> Option<Self> {
        let s: String = s.chars().filter(|&c| c != ',').collect();
        let (whole, frac) = s.split_once('.').unwrap_or((&s, ""));
        if whole.is_empty()
            || frac.len() > 2
            || !(whole.bytes().chain(frac.bytes())).all(|b| b.is_ascii_digit())
        {
            return None;
        }
        let frac = format!("{frac:0<2}");
        let centis = whole.parse::<u64>().ok()?.checked_mul(100)? + frac.parse::<u64>().ok()?;
        Some(Self::from_kb_centis(centis))
    }

    pub fn centibytes(&self) -> u128 {
        self.centibytes
    }

    /// Size in KB, rounded half-up to hundredths.
    pub fn kb_centis(&self) -> u128 {
        div_half_up(self.centibytes, 1024)
    }

    pub fn kb_string(&self) -> String {
        format_centis(self.kb_centis())
    }
}

/// A non-negative rational number of seconds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Seconds {
    num: u128,
    den: u128,
}

impl Seconds {
    pub fn new(num: u128, den: u128) -> Self {
        assert!(den > 0, "zero denominator");
        let g = gcd(num, den).max(1);
        Seconds {
            num: num / g,
            den: den / g,
        }
    }

    pub fn whole(s: u64) -> Self {
        Seconds::new(s as u128, 1)
    }

    pub fn parts(&self) -> (u128, u128) {
        (self.num, self.den)
    }

    /// Hundredths of a second, rounded half-up.
    pub fn centis(&self) -> u128 {
        div_half_up(100 * self.num, self.den)
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn add(self, other: Seconds) -> Seconds {
        Seconds::new(
            self.num * other.den + other.num * self.den,
            self.den * other.den,
        )
    }
}

impl PartialEq for Seconds {
    fn eq(&self, other: &Self) -> bool {
        self.num * other.den == other.num * self.den
    }
}

impl Eq for Seconds {}

impl fmt::Display for Seconds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_centis(self.centis()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ContactWindow {
    pub start_s: u64,
    pub duration_s: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinkModel {
    bandwidth_bps: u64,
    windows: Vec<ContactWindow>,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            bandwidth_bps: DEFAULT_BANDWIDTH_BPS,
            windows: Vec::new(),
        }
    }
}

impl LinkModel {
    pub fn new(bandwidth_bps: u64) -> Result<Self, LinkError> {
        if bandwidth_bps == 0 {
            return Err(LinkError::ZeroBandwidth);
        }
        Ok(LinkModel {
            bandwidth_bps,
            windows: Vec::new(),
        })
    }

    /// Windows must have positive duration, be sorted by start and not
    /// overlap.
    pub fn with_windows(mut self, windows: Vec<ContactWindow>) -> Result<Self, LinkError> {
        for (index, w) in windows.iter().enumerate() {
            if w.duration_s == 0 {
                return Err(LinkError::EmptyWindow { index });
            }
            if index > 0 {
                let prev = windows[index - 1];
                if w.start_s < prev.start_s + prev.duration_s {
                    return Err(LinkError::Overlap { index });
                }
            }
        }
        self.windows = windows;
        Ok(self)
    }

    pub fn bandwidth_bps(&self) -> u64 {
        self.bandwidth_bps
    }

    pub fn windows(&self) -> &[ContactWindow] {
        &self.windows
    }
}

/// `size × 8 / bandwidth`, exactly.
pub fn transmission_latency(size: DataSize, link: &LinkModel) -> Seconds {
    Seconds::new(size.centibytes * 8, 100 * link.bandwidth_bps as u128)
}

pub fn transmission_latency_bytes(bytes: u64, link: &LinkModel) -> Seconds {
    transmission_latency(DataSize::from_bytes(bytes), link)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Schedule {
    Delivered {
        passes: usize,
        completion_s: Seconds,
    },
    Undeliverable {
        capacity_bits: u128,
        required_bits: u128,
    },
}

/// Sends `size` through the contact windows in order at full bandwidth.
pub fn schedule_upload(size: DataSize, link: &LinkModel) -> Result<Schedule, LinkError> {
    let first = link.windows.first().ok_or(LinkError::NoWindows)?;
    // Work in hundredths of a bit so fractional-byte sizes stay exact.
    let mut remaining = size.centibytes * 8;
    if remaining == 0 {
        return Ok(Schedule::Delivered {
            passes: 0,
            completion_s: Seconds::whole(first.start_s),
        });
    }
    let bps = link.bandwidth_bps as u128;
    for (i, w) in link.windows.iter().enumerate() {
        let capacity = w.duration_s as u128 * bps * 100;
        if remaining <= capacity {
            return Ok(Schedule::Delivered {
                passes: i + 1,
                completion_s: Seconds::whole(w.start_s).add(Seconds::new(remaining, bps * 100)),
            });
        }
        remaining -= capacity;
    }
    let capacity_bits = link
        .windows
        .iter()
        .map(|w| w.duration_s as u128 * bps)
        .sum();
    Ok(Schedule::Undeliverable {
        capacity_bits,
        required_bits: size.centibytes * 8 / 100,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModRatioReport {
    pub s_preserved_bytes: u64,
    pub s_upd_bytes: u64,
    pub ratio: f64,
    pub degenerate: bool,
}

pub fn modification_ratio(orig: &FileTree, upd: &FileTree) -> ModRatioReport {
    modification_ratio_with(orig, upd, &ChunkBoundarySpec::default())
}

/// `1 - preserved / upd`, where preserved counts bytes of unchanged files
/// plus bytes the diff retains in modified ones.
pub fn modification_ratio_with(
    orig: &FileTree,
    upd: &FileTree,
    spec: &ChunkBoundarySpec,
) -> ModRatioReport {
    let files: Vec<_> = upd.files().collect();
    let preserved: u64 = files
        .par_iter()
        .map(|(path, new)| match orig.file(path) {
            Some(old) if old.hash() == new.hash() => new.len() as u64,
            Some(old) => diff_file(old, new, spec).retained_bytes(old.content()),
            None => 0,
        })
        .sum();
    let total = upd.total_file_bytes();
    if total == 0 {
        return ModRatioReport {
            s_preserved_bytes: 0,
            s_upd_bytes: 0,
            ratio: 0.0,
            degenerate: true,
        };
    }
    let ratio = if preserved == total {
        0.0
    } else {
        1.0 - preserved as f64 / total as f64
    };
    ModRatioReport {
        s_preserved_bytes: preserved,
        s_upd_bytes: total,
        ratio,
        degenerate: false,
    }
}

/// Deterministic tar of `tree`: path order, zero timestamps and owners,
/// fixed modes.
pub fn archive_tree(tree: &FileTree) -> Vec<u8> {
    let mut builder = tar::Builder::new(Vec::new());
    for (path, entry) in tree.entries() {
        let mut header = tar::Header::new_gnu();
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        let res = match entry {
            Entry::Directory => {
                header.set_entry_type(tar::EntryType::Directory);
                header.set_mode(0o755);
                header.set_size(0);
                builder.append_data(&mut header, format!("{}/", path.as_str()), std::io::empty())
            }
            Entry::File(f) => {
                header.set_entry_type(tar::EntryType::Regular);
                header.set_mode(0o644);
                header.set_size(f.len() as u64);
                builder.append_data(&mut header, path.as_str(), f.content())
            }
        };
        res.expect("writing a tar to memory cannot fail");
    }
    builder
        .into_inner()
        .expect("writing a tar to memory cannot fail")
}

pub fn gzip_archive_size(tree: &FileTree) -> u64 {
    compress_body(&archive_tree(tree)).len() as u64
}

/// Compressed upload sizes of the three comparison strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BaselineSizes {
    /// Whole updated tree.
    pub b1_bytes: u64,
    /// Everything under the application prefix.
    pub b2_bytes: u64,
    /// Added and modified files only.
    pub b3_bytes: u64,
}

pub fn baseline_sizes(
    upd: &FileTree,
    changeset: &ChangeSet,
    app_prefix: &RelPath,
) -> Result<BaselineSizes, LinkError> {
    if !upd.entries().any(|(p, _)| p.starts_with(app_prefix)) {
        return Err(LinkError::EmptyPrefix(app_prefix.to_string()));
    }
    let mut changed = FileTree::new("changed");
    for path in changeset.files_with_new_content() {
        if let Some(f) = upd.file(path) {
            changed
                .add_file(path.clone(), f.content().to_vec())
                .expect("paths from a valid tree are valid");
        }
    }
    let (b1, (b2, b3)) = rayon::join(
        || gzip_archive_size(upd),
        || {
            rayon::join(
                || gzip_archive_size(&upd.subtree(app_prefix)),
                || compress_body(&archive_files_only(&changed)).len() as u64,
            )
        },
    );
    Ok(BaselineSizes {
        b1_bytes: b1,
        b2_bytes: b2,
        b3_bytes: b3,
    })
}

/// Like [`archive_tree`] but omits directory records.
fn archive_files_only(tree: &FileTree) -> Vec<u8> {
    let mut builder = tar::Builder::new(Vec::new());
    for (path, f) in tree.files() {
        let mut header = tar::Header::new_gnu();
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_entry_type(tar::EntryType::Regular);
        header.set_mode(0o644);
        header.set_size(f.len() as u64);
        builder
            .append_data(&mut header, path.as_str(), f.content())
            .expect("writing a tar to memory cannot fail");
    }
    builder
        .into_inner()
        .expect("writing a tar to memory cannot fail")
}

/// Counts the regular files in a tar archive.
pub fn archive_file_count(archive: &[u8]) -> usize {
    tar::Archive::new(archive)
        .entries()
        .expect("in-memory archive")
        .filter_map(Result::ok)
        .filter(|e| e.header().entry_type().is_file())
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgen::compare_trees;

    fn p(s: &str) -> RelPath {
        RelPath::new(s).unwrap()
    }

    #[test]
    fn latency_spot_values() {
        let link = LinkModel::default();
        let lat =
            |kb: &str| transmission_latency(DataSize::parse_kb(kb).unwrap(), &link).to_string();
        assert_eq!(lat("48.64"), "1.99");
        assert_eq!(lat("188,845.50"), "7,735.11");
        assert_eq!(lat("1.35"), "0.06");
        assert_eq!(transmission_latency_bytes(0, &link).centis(), 0);
    }

    #[test]
    fn half_up_rounding() {
        // 1 byte at 1600 bps is exactly 0.005 s.
        assert_eq!(
            transmission_latency_bytes(1, &LinkModel::new(1600).unwrap()).centis(),
            1
        );
        assert_eq!(Seconds::new(5, 1000).centis(), 1);
        assert_eq!(Seconds::new(4, 1000).centis(), 0);
        assert_eq!(format_centis(123_456_789), "1,234,567.89");
        assert_eq!(format_centis(5), "0.05");
    }

    #[test]
    fn kb_parsing() {
        assert_eq!(DataSize::parse_kb("1").unwrap(), DataSize::from_bytes(1024));
        assert_eq!(
            DataSize::parse_kb("0.5").unwrap(),
            DataSize::from_bytes(512)
        );
        assert_eq!(
            DataSize::parse_kb("188,845.50").unwrap().kb_string(),
            "188,845.50"
        );
        assert!(DataSize::parse_kb("1.234").is_none());
        assert!(DataSize::parse_kb("x").is_none());
    }

    #[test]
    fn schedule_examples() {
        let one = LinkModel::default()
            .with_windows(vec![ContactWindow {
                start_s: 100,
                duration_s: 600,
            }])
            .unwrap();
        assert_eq!(
            schedule_upload(DataSize::from_bytes(1024), &one).unwrap(),
            Schedule::Delivered {
                passes: 1,
                completion_s: Seconds::new(100 * 100_000 + 4096, 100_000),
            }
        );
        assert_eq!(
            schedule_upload(DataSize::from_bytes(0), &one).unwrap(),
            Schedule::Delivered {
                passes: 0,
                completion_s: Seconds::whole(100),
            }
        );
        let four = LinkModel::default()
            .with_windows(
                (0..4)
                    .map(|i| ContactWindow {
                        start_s: i * 14_400,
                        duration_s: 600,
                    })
                    .collect(),
            )
            .unwrap();
        match schedule_upload(DataSize::parse_kb("30000").unwrap(), &four).unwrap() {
            Schedule::Delivered { passes, .. } => assert_eq!(passes, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            schedule_upload(DataSize::parse_kb("60000").unwrap(), &four).unwrap(),
            Schedule::Undeliverable {
                capacity_bits: 480_000_000,
                ..
            }
        ));
        assert_eq!(
            schedule_upload(DataSize::from_bytes(1), &LinkModel::default()),
            Err(LinkError::NoWindows)
        );
    }

    #[test]
    fn window_validation() {
        let w = |s, d| ContactWindow {
            start_s: s,
            duration_s: d,
        };
        assert_eq!(LinkModel::new(0), Err(LinkError::ZeroBandwidth));
        assert_eq!(
            LinkModel::default().with_windows(vec![w(0, 10), w(5, 10)]),
            Err(LinkError::Overlap { index: 1 })
        );
        assert_eq!(
            LinkModel::default().with_windows(vec![w(0, 0)]),
            Err(LinkError::EmptyWindow { index: 0 })
        );
        assert!(LinkModel::default()
            .with_windows(vec![w(0, 10), w(10, 10)])
            .is_ok());
    }

    #[test]
    fn ratio_extremes() {
        let mut a = FileTree::new("a");
        a.add_file(p("x.txt"), b"one\ntwo\n".to_vec()).unwrap();
        let r = modification_ratio(&a, &a);
        assert_eq!(
            (r.ratio, r.s_preserved_bytes, r.degenerate),
            (0.0, 8, false)
        );
        let mut b = FileTree::new("b");
        b.add_file(p("x.txt"), b"uno\ndos\n".to_vec()).unwrap();
        assert_eq!(modification_ratio(&a, &b).ratio, 1.0);
        let mut half = FileTree::new("h");
        half.add_file(p("x.txt"), b"one\nTWO\n".to_vec()).unwrap();
        assert_eq!(modification_ratio(&a, &half).ratio, 0.5);
        let r = modification_ratio(&a, &FileTree::new("empty"));
        assert!(r.degenerate && r.ratio == 0.0);
    }

    #[test]
    fn baselines() {
        let mut a = FileTree::new("a");
        a.add_file(p("app/m.py"), b"print(1)\n".repeat(200))
            .unwrap();
        a.add_file(p("app/n.py"), b"x = 2\n".repeat(300)).unwrap();
        a.add_file(
            p("usr/lib/big.so"),
            (0..200_000u32)
                .map(|i| (i.wrapping_mul(2654435761) >> 13) as u8)
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let same = baseline_sizes(&a, &compare_trees(&a, &a), &p("app")).unwrap();
        let mut changed = FileTree::new("c");
        assert_eq!(
            same.b3_bytes,
            compress_body(&archive_files_only(&changed)).len() as u64
        );
        assert!(same.b2_bytes <= same.b1_bytes);

        let mut b = a.clone();
        b.add_file(p("app/new.py"), b"import os\n".to_vec())
            .unwrap();
        let cs = compare_trees(&a, &b);
        let sizes = baseline_sizes(&b, &cs, &p("app")).unwrap();
        assert!(sizes.b3_bytes < sizes.b2_bytes && sizes.b2_bytes <= sizes.b1_bytes);
        changed
            .add_file(p("app/new.py"), b"import os\n".to_vec())
            .unwrap();
        assert_eq!(archive_file_count(&archive_files_only(&changed)), 1);

        assert_eq!(
            baseline_sizes(&b, &cs, &p("opt")),
            Err(LinkError::EmptyPrefix("opt".into()))
        );
    }

    #[test]
    fn archives_are_deterministic() {
        let mut a = FileTree::new("a");
        a.add_file(p("d/e/f.txt"), b"hello\n".to_vec()).unwrap();
        a.add_file(p(&format!("long/{}", "n".repeat(150))), b"x".to_vec())
            .unwrap();
        let t1 = archive_tree(&a);
        assert_eq!(t1, archive_tree(&a.clone()));
        let back = FileTree::load_tar(&t1[..], "t").unwrap();
        assert_eq!(back.digest(), a.digest());
    }
}
