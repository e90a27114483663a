//! Synthetic update variants for tests and benchmarks.
//!
//! [`sample_app_tree`] builds a Python-style application tree on top of a
//! binary base layer. [`generate_variant`] perturbs a tree with neutral
//! edits (comments, logging, dead branches, unused variables, deletions of
//! comments, imports and log lines) until its modification ratio reaches the
//! requested level.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::diffgen::{diff_file, ChunkBoundarySpec};
use crate::fstree::{FileData, FileTree, RelPath};
use crate::linksim::modification_ratio;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("invalid variant spec: {0}")]
    InvalidSpec(String),
    #[error("no textual file to edit in scope")]
    NoTextualFiles,
    #[error("scope {0:?} matches nothing")]
    EmptyScope(String),
    #[error("target ratio {target:.4} not reached, stopped at {achieved:.4}")]
    Unreachable { target: f64, achieved: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum TextualEditKind {
    Comment,
    Logging,
    InactiveConditional,
    UnusedVariable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum DeletionKind {
    RedundantComment,
    UnusedImport,
    Log,
}

impl DeletionKind {
    fn matches(self, line: &[u8]) -> bool {
        let Ok(text) = std::str::from_utf8(line) else {
            return false;
        };
        let t = text.trim();
        match self {
            DeletionKind::RedundantComment => t.starts_with('#'),
            DeletionKind::UnusedImport => {
                (t.starts_with("import ") || (t.starts_with("from ") && t.contains(" import ")))
                    && !t.ends_with('(')
            }
            DeletionKind::Log => {
                (t.starts_with("logger.") || t.starts_with("logging.") || t.starts_with("print("))
                    && t.ends_with(')')
            }
        }
    }
}

/// Share of edit steps that insert versus delete lines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EditMix {
    pub insert: f64,
    pub delete: f64,
}

impl Default for EditMix {
    fn default() -> Self {
        EditMix {
            insert: 0.85,
            delete: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSpec {
    pub target_ratio: f64,
    pub seed: u64,
    pub edit_mix: EditMix,
    pub textual_edit_kinds: Vec<TextualEditKind>,
    pub deletion_kinds: Vec<DeletionKind>,
    /// Chance that an edit step flips bytes in a binary file instead of
    /// editing text, once the remaining gap is large. Zero disables it.
    pub binary_edit_share: f64,
    /// Restricts edits, and the ratio they are measured by, to one subtree.
    pub scope: Option<RelPath>,
}

impl VariantSpec {
    pub fn new(target_ratio: f64, seed: u64) -> Self {
        VariantSpec {
            target_ratio,
            seed,
            edit_mix: EditMix::default(),
            textual_edit_kinds: vec![
                TextualEditKind::Comment,
                TextualEditKind::Logging,
                TextualEditKind::InactiveConditional,
                TextualEditKind::UnusedVariable,
            ],
            deletion_kinds: vec![
                DeletionKind::RedundantComment,
                DeletionKind::UnusedImport,
                DeletionKind::Log,
            ],
            binary_edit_share: 0.0,
            scope: None,
        }
    }

    pub fn with_scope(mut self, scope: RelPath) -> Self {
        self.scope = Some(scope);
        self
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_owned()));
        if !(0.0..1.0).contains(&self.target_ratio) {
            return bad("target ratio must be in [0, 1)");
        }
        let EditMix { insert, delete } = self.edit_mix;
        if insert < 0.0 || delete < 0.0 || ((insert + delete) - 1.0).abs() > 1e-9 {
            return bad("edit mix proportions must be non-negative and sum to 1");
        }
        if insert == 0.0 || self.textual_edit_kinds.is_empty() {
            return bad("at least one insertion kind with a positive share is required");
        }
        if !(0.0..=1.0).contains(&self.binary_edit_share) {
            return bad("binary edit share must be in [0, 1]");
        }
        if delete > 0.0 && self.deletion_kinds.is_empty() {
            return bad("a positive deletion share needs at least one deletion kind");
        }
        Ok(())
    }
}

const WORDS: &[&str] = &[
    "cache", "buffer", "sensor", "frame", "orbit", "payload", "queue", "retry", "window", "vector",
    "thermal", "attitude", "packet", "image", "task", "schedule", "health", "power", "link",
    "status",
];

fn word(rng: &mut impl Rng) -> &'static str {
    WORDS.choose(rng).expect("non-empty")
}

fn indent_of(line: &[u8]) -> usize {
    line.iter().take_while(|&&b| b == b' ').count()
}

fn is_blank(line: &[u8]) -> bool {
    line.iter().all(|b| b.is_ascii_whitespace())
}

#[derive(Clone)]
struct Line {
    bytes: Vec<u8>,
    original: bool,
}

/// Indentation for lines inserted before `lines[at]`.
fn insertion_indent(lines: &[Line], at: usize) -> usize {
    let prev = lines[..at].iter().rev().find(|l| !is_blank(&l.bytes));
    let next = lines[at..].iter().find(|l| !is_blank(&l.bytes));
    match (prev, next) {
        (Some(p), _) if p.bytes.trim_ascii_end().ends_with(b":") => indent_of(&p.bytes) + 4,
        (_, Some(n)) => indent_of(&n.bytes),
        (Some(p), None) => indent_of(&p.bytes),
        (None, None) => 0,
    }
}

fn render_block(kind: TextualEditKind, indent: usize, rng: &mut impl Rng) -> Vec<Vec<u8>> {
    let pad = " ".repeat(indent);
    let n: u32 = rng.gen_range(1..10_000);
    let lines = match kind {
        TextualEditKind::Comment => vec![format!(
            "{pad}# {} {} {} check {n}",
            word(rng),
            word(rng),
            word(rng)
        )],
        TextualEditKind::Logging => vec![format!(
            "{pad}logger.debug(\"{} {} state %s\", {n})",
            word(rng),
            word(rng)
        )],
        TextualEditKind::InactiveConditional => vec![
            format!("{pad}if False:"),
            format!("{pad}    _{}_{} = {n}", word(rng), word(rng)),
        ],
        TextualEditKind::UnusedVariable => vec![format!(
            "{pad}_unused_{}_{n} = \"{}\"",
            word(rng),
            word(rng)
        )],
    };
    lines
        .into_iter()
        .map(|l| format!("{l}\n").into_bytes())
        .collect()
}

fn to_lines(content: &[u8]) -> Vec<Line> {
    crate::diffgen::split_lines(content)
        .into_iter()
        .map(|l| Line {
            bytes: l.to_vec(),
            original: true,
        })
        .collect()
}

fn from_lines(lines: &[Line]) -> Vec<u8> {
    lines.iter().flat_map(|l| l.bytes.iter().copied()).collect()
}

/// Working copy of a touched file plus the running estimate of how many of
/// its bytes survive from the original.
enum Draft {
    Text(Vec<Line>),
    Binary { content: Vec<u8>, retained: u64 },
}

/// Minimum shortfall, in bytes, before a binary file is perturbed: a byte
/// flip costs whole chunks, which would overshoot a small remaining gap.
const BINARY_DEFICIT: f64 = 64.0 * 1024.0;
const MAX_STEPS: usize = 500_000;

/// Produces a variant of `orig` whose modification ratio (within `scope`)
/// first reaches `target_ratio`. Deterministic for a given tree and spec.
pub fn generate_variant(orig: &FileTree, spec: &VariantSpec) -> Result<FileTree, CorpusError> {
    spec.validate()?;
    if spec.target_ratio == 0.0 {
        return Ok(orig.clone());
    }
    let scoped = |t: &FileTree| match &spec.scope {
        Some(s) => t.subtree(s),
        None => t.clone(),
    };
    let base = scoped(orig);
    if let Some(s) = &spec.scope {
        if !base.contains(s) {
            return Err(CorpusError::EmptyScope(s.to_string()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut textual: Vec<&RelPath> = base
        .files()
        .filter(|(_, f)| f.is_textual())
        .map(|(p, _)| p)
        .collect();
    let binaries: Vec<&RelPath> = base
        .files()
        .filter(|(_, f)| !f.is_textual() && f.len() >= 1024)
        .map(|(p, _)| p)
        .collect();
    if textual.is_empty() {
        return Err(CorpusError::NoTextualFiles);
    }
    textual.shuffle(&mut rng);
    let touched =
        ((spec.target_ratio.sqrt() * textual.len() as f64).ceil() as usize).clamp(1, textual.len());
    let textual = &textual[..touched];

    let chunk_spec = ChunkBoundarySpec::default();
    let mut drafts: BTreeMap<RelPath, Draft> = BTreeMap::new();
    let mut upd_total = base.total_file_bytes() as f64;
    // Lower bound on preserved bytes; the diff can only find more.
    let mut preserved = upd_total;
    let mut steps = 0usize;

    let build = |drafts: &BTreeMap<RelPath, Draft>| {
        let mut out = orig.clone();
        for (path, d) in drafts {
            let content = match d {
                Draft::Text(lines) => from_lines(lines),
                Draft::Binary { content, .. } => content.clone(),
            };
            out.replace_file(path, content)
                .expect("draft paths are files of orig");
        }
        out
    };

    loop {
        while 1.0 - preserved / upd_total < spec.target_ratio {
            steps += 1;
            if steps > MAX_STEPS {
                let achieved = modification_ratio(&base, &scoped(&build(&drafts))).ratio;
                return Err(CorpusError::Unreachable {
                    target: spec.target_ratio,
                    achieved,
                });
            }

            let deficit = (spec.target_ratio - (1.0 - preserved / upd_total)) * upd_total;
            if !binaries.is_empty()
                && spec.binary_edit_share > 0.0
                && deficit > BINARY_DEFICIT
                && rng.gen_bool(spec.binary_edit_share)
            {
                let path = binaries[rng.gen_range(0..binaries.len())];
                let file = orig.file(path).expect("in scope");
                let draft = drafts.entry(path.clone()).or_insert_with(|| Draft::Binary {
                    content: file.content().to_vec(),
                    retained: file.len() as u64,
                });
                let Draft::Binary { content, retained } = draft else {
                    unreachable!("binary paths only hold binary drafts")
                };
                let run = rng.gen_range(1..=16usize).min(content.len());
                let at = rng.gen_range(0..=content.len() - run);
                for b in &mut content[at..at + run] {
                    *b ^= 0xFF;
                }
                let now = diff_file(file, &FileData::new(content.clone()), &chunk_spec)
                    .retained_bytes(file.content());
                preserved -= (*retained - now) as f64;
                *retained = now;
                continue;
            }

            let path = textual[rng.gen_range(0..textual.len())];
            let draft = drafts.entry(path.clone()).or_insert_with(|| {
                Draft::Text(to_lines(orig.file(path).expect("in scope").content()))
            });
            let Draft::Text(lines) = draft else {
                unreachable!("textual paths only hold text drafts")
            };

            if rng.gen_bool(spec.edit_mix.delete) {
                let kind = *spec.deletion_kinds.choose(&mut rng).expect("validated");
                let candidates: Vec<usize> = (0..lines.len())
                    .filter(|&i| lines[i].original && kind.matches(&lines[i].bytes))
                    .collect();
                if let Some(&i) = candidates.choose(&mut rng) {
                    let removed = lines.remove(i);
                    preserved -= removed.bytes.len() as f64;
                    upd_total -= removed.bytes.len() as f64;
                    continue;
                }
            }

            // Never place text after a final line that lacks its newline.
            let unterminated = lines.last().is_some_and(|l| !l.bytes.ends_with(b"\n"));
            let at = rng.gen_range(0..=lines.len() - usize::from(unterminated));
            let kind = *spec.textual_edit_kinds.choose(&mut rng).expect("validated");
            let block = render_block(kind, insertion_indent(lines, at), &mut rng);
            upd_total += block.iter().map(|l| l.len() as f64).sum::<f64>();
            lines.splice(
                at..at,
                block.into_iter().map(|bytes| Line {
                    bytes,
                    original: false,
                }),
            );
        }

        let variant = build(&drafts);
        let report = modification_ratio(&base, &scoped(&variant));
        if report.ratio >= spec.target_ratio {
            return Ok(variant);
        }
        preserved = report.s_preserved_bytes as f64;
        upd_total = report.s_upd_bytes as f64;
    }
}

/// Shape of a synthetic application tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppShape {
    pub modules: usize,
    pub min_lines: usize,
    pub max_lines: usize,
    pub assets: usize,
    pub asset_bytes: usize,
    pub base_libs: usize,
    pub base_lib_bytes: usize,
}

impl Default for AppShape {
    fn default() -> Self {
        AppShape {
            modules: 10,
            min_lines: 120,
            max_lines: 400,
            assets: 2,
            asset_bytes: 48 * 1024,
            base_libs: 3,
            base_lib_bytes: 192 * 1024,
        }
    }
}

fn identifier(rng: &mut impl Rng) -> String {
    format!("{}_{}", word(rng), word(rng))
}

/// One statement at `pad`, sometimes with a nested line.
fn statement(pad: &str, rng: &mut impl Rng) -> Vec<String> {
    let (v, w) = (identifier(rng), identifier(rng));
    let n: u32 = rng.gen_range(1..5000);
    match rng.gen_range(0..9) {
        0 => vec![format!("{pad}{v} = {w} * {n} + {}", rng.gen_range(0..100))],
        1 => vec![format!("{pad}{v} = compute_{}({w}, {n})", word(rng))],
        2 => vec![format!(
            "{pad}# {} the {} {} before {}.",
            word(rng),
            word(rng),
            word(rng),
            word(rng)
        )],
        3 => vec![format!(
            "{pad}logger.info(\"{} {} %s\", {v})",
            word(rng),
            word(rng)
        )],
        4 => vec![
            format!("{pad}if {v} > {n}:"),
            format!("{pad}    {w} = {v} - {n}"),
        ],
        5 => vec![
            format!("{pad}for {} in range({n}):", word(rng)),
            format!("{pad}    {v}.append({w})"),
        ],
        6 => vec![format!(
            "{pad}{v} = [{w} for {w} in {} if {w}]",
            identifier(rng)
        )],
        7 => vec![format!(
            "{pad}{v} = {{\"{}\": {n}, \"{}\": {w}}}",
            word(rng),
            word(rng)
        )],
        _ => vec![format!("{pad}{v} = self_check({w}, \"{}\")", word(rng))],
    }
}

fn python_module(name: &str, target_lines: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut out = vec![
        format!("# Module {name}: {} {} helpers.", word(rng), word(rng)),
        "import os".into(),
        "import sys".into(),
        "import logging".into(),
        format!("from {} import {}", word(rng), identifier(rng)),
        String::new(),
        "logger = logging.getLogger(__name__)".into(),
        String::new(),
    ];
    let mut i = 0;
    while out.len() < target_lines {
        i += 1;
        let (a, b) = (word(rng), word(rng));
        let (pad, header) = if rng.gen_bool(0.7) {
            (
                "    ",
                vec![format!(
                    "def {a}_{b}_{i}({}, {}=None):",
                    identifier(rng),
                    identifier(rng)
                )],
            )
        } else {
            (
                "        ",
                vec![
                    format!("class {}{}{i}:", capitalize(a), capitalize(b)),
                    format!("    def {}(self, {}):", identifier(rng), identifier(rng)),
                ],
            )
        };
        out.extend(header);
        for _ in 0..rng.gen_range(3..12) {
            out.extend(statement(pad, rng));
        }
        out.push(format!("{pad}return {}", identifier(rng)));
        out.push(String::new());
        out.push(String::new());
    }
    out.push(format!(
        "if __name__ == \"__main__\":\n    sys.exit({name}_main(os.environ))"
    ));
    let mut text = out.join("\n");
    text.push('\n');
    text.into_bytes()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
        .unwrap_or_default()
}

/// Bytes resembling a compiled object: a repeated table with noise.
fn binary_blob(len: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut table = [0u8; 64];
    rng.fill_bytes(&mut table);
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(b"\x7fELF\x02\x01\x01\0");
    while out.len() < len {
        if rng.gen_bool(0.5) {
            let mut noise = [0u8; 32];
            rng.fill_bytes(&mut noise);
            out.extend_from_slice(&noise);
        } else {
            out.extend_from_slice(&table[..rng.gen_range(8..64)]);
        }
    }
    out.truncate(len);
    out
}

/// A deterministic application tree: Python modules and binary assets under
/// `app/`, shared libraries under `usr/lib/`.
pub fn sample_app_tree(seed: u64, shape: AppShape) -> FileTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = FileTree::new(format!("sample-{seed}"));
    let p = |s: String| RelPath::new(&s).expect("generated paths are valid");
    for i in 0..shape.modules {
        let name = format!("{}_{i}", word(&mut rng));
        let dir = if i % 3 == 2 { "app/lib" } else { "app" };
        let lines = rng.gen_range(shape.min_lines..=shape.max_lines.max(shape.min_lines));
        tree.add_file(
            p(format!("{dir}/{name}.py")),
            python_module(&name, lines, &mut rng),
        )
        .expect("fresh tree");
    }
    for i in 0..shape.assets {
        tree.add_file(
            p(format!("app/assets/model_{i}.bin")),
            binary_blob(shape.asset_bytes, &mut rng),
        )
        .expect("fresh tree");
    }
    for i in 0..shape.base_libs {
        tree.add_file(
            p(format!("usr/lib/lib{}{i}.so", word(&mut rng))),
            binary_blob(shape.base_lib_bytes, &mut rng),
        )
        .expect("fresh tree");
    }
    tree.add_dir(p("var/log".into())).expect("fresh tree");
    tree
}
