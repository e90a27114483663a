#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use satpatch_core::fstree::{Entry, FileTree, RelPath};

const VOCAB: &[&str] = &[
    "alpha", "beta", "gamma", "delta", "omega", "{", "}", "return", "x", "y = 1", "if", "else",
    "ñandú", "for", "end", "#", "//", "\t", "print(x)",
];

pub fn p(s: &str) -> RelPath {
    RelPath::new(s).unwrap()
}

pub fn text_content(rng: &mut impl Rng, size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(size + 64);
    while out.len() < size {
        let words = rng.gen_range(0..8);
        for i in 0..words {
            if i > 0 {
                out.push(b' ');
            }
            out.extend_from_slice(VOCAB.choose(rng).unwrap().as_bytes());
        }
        out.push(b'\n');
    }
    out.truncate(size);
    out
}

pub fn binary_content(rng: &mut impl Rng, size: usize) -> Vec<u8> {
    let mut out = vec![0u8; size];
    rng.fill_bytes(&mut out);
    if size > 0 {
        out[0] = 0;
    }
    out
}

/// Mostly small files with an occasional large one.
pub fn file_size(rng: &mut impl Rng, max: usize) -> usize {
    if rng.gen_bool(0.05) {
        rng.gen_range(0..=max)
    } else {
        rng.gen_range(0..=max.min(8 * 1024))
    }
}

fn random_content(rng: &mut impl Rng, max: usize) -> Vec<u8> {
    let size = file_size(rng, max);
    if rng.gen_bool(0.6) {
        text_content(rng, size)
    } else {
        binary_content(rng, size)
    }
}

pub fn random_tree(rng: &mut impl Rng, max_files: usize, max_size: usize) -> FileTree {
    let mut t = FileTree::new("rand");
    let dirs = ["", "a", "a/b", "a/b/c", "d", "d/e", "f"];
    for _ in 0..rng.gen_range(0..3) {
        let _ = t.add_dir(p(&format!("empty{}", rng.gen_range(0..4))));
    }
    let n = rng.gen_range(0..=max_files);
    for i in 0..n {
        let dir = dirs.choose(rng).unwrap();
        let name = format!("{dir}/file{i}.dat");
        let _ = t.add_file(p(&name), random_content(rng, max_size));
    }
    t
}

fn mutate_text(rng: &mut impl Rng, content: &[u8]) -> Vec<u8> {
    let mut lines: Vec<Vec<u8>> = content
        .split_inclusive(|&b| b == b'\n')
        .map(<[u8]>::to_vec)
        .collect();
    for _ in 0..rng.gen_range(1..6) {
        match rng.gen_range(0..3) {
            0 => {
                let at = rng.gen_range(0..=lines.len());
                let n = rng.gen_range(1..80);
                let block = text_content(rng, n);
                lines.insert(at, block);
            }
            1 if !lines.is_empty() => {
                let at = rng.gen_range(0..lines.len());
                let end = (at + rng.gen_range(1..5)).min(lines.len());
                lines.drain(at..end);
            }
            _ if !lines.is_empty() => {
                let at = rng.gen_range(0..lines.len());
                let n = rng.gen_range(1..40);
                lines[at] = text_content(rng, n);
            }
            _ => {}
        }
    }
    lines.concat()
}

fn mutate_binary(rng: &mut impl Rng, content: &[u8]) -> Vec<u8> {
    let mut out = content.to_vec();
    for _ in 0..rng.gen_range(1..4) {
        match rng.gen_range(0..4) {
            0 if !out.is_empty() => {
                let at = rng.gen_range(0..out.len());
                let end = (at + rng.gen_range(1..200)).min(out.len());
                rng.fill_bytes(&mut out[at..end]);
            }
            1 => {
                let at = rng.gen_range(0..=out.len());
                let mut ins = vec![0u8; rng.gen_range(1..500)];
                rng.fill_bytes(&mut ins);
                out.splice(at..at, ins);
            }
            2 if !out.is_empty() => {
                let at = rng.gen_range(0..out.len());
                let end = (at + rng.gen_range(1..500)).min(out.len());
                out.drain(at..end);
            }
            _ => {
                let mut tail = vec![0u8; rng.gen_range(0..300)];
                rng.fill_bytes(&mut tail);
                out.extend(tail);
            }
        }
    }
    out
}

/// Derives an updated tree: deletions, edits, kind changes, new files and
/// directories.
pub fn mutate(rng: &mut impl Rng, orig: &FileTree, max_size: usize) -> FileTree {
    let mut t = orig.clone();
    let files: Vec<RelPath> = orig.files().map(|(p, _)| p.clone()).collect();
    for path in files {
        let roll: f64 = rng.gen();
        if roll < 0.12 {
            t.remove_entry(&path).unwrap();
        } else if roll < 0.14 {
            t.remove_entry(&path).unwrap();
            t.add_file(
                path.join("inner.txt").unwrap(),
                b"now a directory\n".to_vec(),
            )
            .unwrap();
        } else if roll < 0.40 {
            let f = orig.file(&path).unwrap();
            let new = if f.is_textual() {
                mutate_text(rng, f.content())
            } else {
                mutate_binary(rng, f.content())
            };
            t.replace_file(&path, new).unwrap();
        }
    }
    let empty_dirs: Vec<RelPath> = t
        .directories()
        .filter(|d| !t.entries().any(|(q, _)| q != *d && q.starts_with(d)))
        .cloned()
        .collect();
    for d in empty_dirs {
        match rng.gen_range(0..4) {
            0 => {
                t.remove_entry(&d).unwrap();
            }
            1 => {
                t.remove_entry(&d).unwrap();
                t.insert_entry(
                    d,
                    Entry::File(satpatch_core::fstree::FileData::new(b"was a dir".to_vec())),
                )
                .ok();
            }
            _ => {}
        }
    }
    for i in 0..rng.gen_range(0..15) {
        let dir = ["", "a", "new", "new/deep", "d/e"].choose(rng).unwrap();
        let _ = t.add_file(
            p(&format!("{dir}/added{i}.dat")),
            random_content(rng, max_size),
        );
    }
    if rng.gen_bool(0.3) {
        let _ = t.add_dir(p("fresh/empty"));
    }
    t
}
