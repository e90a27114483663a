//! Acceptance suite. Every test prints exactly one `PASS`/`FAIL` line to the
//! real stdout (bypassing capture) before asserting.

mod common;

use std::collections::HashSet;
use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use common::p;
use satpatch_core::corpusgen::{generate_variant, sample_app_tree, AppShape, VariantSpec};
use satpatch_core::diffgen::{chunkify, compare_trees, line_diff, ChunkBoundarySpec, OpKind};
use satpatch_core::fstree::{Digest, FileTree};
use satpatch_core::layerstore::{FailureEvent, FailurePhase, LayerStack, RecoveryStrategy};
use satpatch_core::linksim::{
    baseline_sizes, modification_ratio, transmission_latency, DataSize, LinkModel,
};
use satpatch_core::package::{
    compress_body, decode_package, decompress_body, encode_package, reseal,
};
use satpatch_core::reconstruct::apply_package;

fn report(name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "{verdict} {name}: {detail}").unwrap();
    out.flush().unwrap();
    assert!(ok, "{name}: {detail}");
}

/// Published (app, level %, [B1 KB, B1 s, B2 KB, B2 s, B3 KB, B3 s, delta KB,
/// delta s]) rows, all at 200 kbps.
const REFERENCE_ROWS: &[(u32, u32, [&str; 8])] = &[
    (
        1,
        10,
        [
            "942,701.00",
            "38,613.03",
            "188,845.50",
            "7,735.11",
            "146.96",
            "6.02",
            "48.64",
            "1.99",
        ],
    ),
    (
        1,
        20,
        [
            "943,308.00",
            "38,637.90",
            "189,061.38",
            "7,743.95",
            "331.91",
            "13.60",
            "154.34",
            "6.32",
        ],
    ),
    (
        1,
        50,
        [
            "945,335.00",
            "38,720.92",
            "189,819.63",
            "7,775.01",
            "905.87",
            "37.10",
            "709.26",
            "29.05",
        ],
    ),
    (
        2,
        10,
        [
            "127,516.50",
            "5,223.08",
            "11.50",
            "0.47",
            "11.01",
            "0.45",
            "2.24",
            "0.09",
        ],
    ),
    (
        2,
        20,
        [
            "127,517.00",
            "5,224.10",
            "11.69",
            "0.48",
            "11.01",
            "0.45",
            "2.24",
            "0.09",
        ],
    ),
    (
        2,
        50,
        [
            "127,516.50",
            "5,223.08",
            "11.49",
            "0.47",
            "10.82",
            "0.44",
            "3.65",
            "0.15",
        ],
    ),
    (
        3,
        10,
        [
            "62,805.50",
            "2,572.51",
            "0.88",
            "0.04",
            "0.67",
            "0.03",
            "0.29",
            "0.01",
        ],
    ),
    (
        3,
        20,
        [
            "62,805.50",
            "2,572.51",
            "0.91",
            "0.04",
            "0.69",
            "0.03",
            "0.34",
            "0.01",
        ],
    ),
    (
        3,
        50,
        [
            "62,805.50",
            "2,572.51",
            "1.00",
            "0.04",
            "0.77",
            "0.03",
            "0.45",
            "0.02",
        ],
    ),
    (
        4,
        10,
        [
            "386,661.50",
            "15,837.66",
            "9.77",
            "0.40",
            "8.71",
            "0.36",
            "1.47",
            "0.06",
        ],
    ),
    (
        4,
        20,
        [
            "386,664.00",
            "15,837.76",
            "11.78",
            "0.48",
            "9.79",
            "0.40",
            "1.96",
            "0.08",
        ],
    ),
    (
        4,
        50,
        [
            "386,665.00",
            "15,837.80",
            "12.83",
            "0.53",
            "13.03",
            "0.53",
            "3.08",
            "0.13",
        ],
    ),
    (
        5,
        10,
        [
            "2,310,128.50",
            "94,622.86",
            "11.51",
            "0.47",
            "9.97",
            "0.41",
            "1.93",
            "0.08",
        ],
    ),
    (
        5,
        20,
        [
            "2,310,130.50",
            "94,622.95",
            "13.44",
            "0.55",
            "4.46",
            "0.18",
            "3.68",
            "0.15",
        ],
    ),
    (
        5,
        50,
        [
            "2,310,141.00",
            "94,623.38",
            "23.79",
            "0.97",
            "22.62",
            "0.93",
            "13.38",
            "0.55",
        ],
    ),
    (
        6,
        10,
        [
            "743,251.50",
            "30,443.58",
            "205.08",
            "8.40",
            "77.76",
            "3.19",
            "32.41",
            "1.33",
        ],
    ),
    (
        6,
        20,
        [
            "743,294.00",
            "30,445.32",
            "247.67",
            "10.14",
            "145.92",
            "5.98",
            "72.12",
            "2.95",
        ],
    ),
    (
        6,
        50,
        [
            "743,540.00",
            "30,455.40",
            "493.39",
            "20.21",
            "412.86",
            "16.91",
            "316.20",
            "12.95",
        ],
    ),
    (
        7,
        10,
        [
            "392,131.00",
            "16,061.69",
            "8.61",
            "0.76",
            "16.50",
            "0.68",
            "2.26",
            "0.09",
        ],
    ),
    (
        7,
        20,
        [
            "392,131.00",
            "16,061.69",
            "18.61",
            "0.76",
            "16.52",
            "0.68",
            "4.41",
            "0.18",
        ],
    ),
    (
        7,
        50,
        [
            "392,131.00",
            "16,061.69",
            "18.58",
            "0.76",
            "16.52",
            "0.68",
            "1.35",
            "0.06",
        ],
    ),
    (
        8,
        10,
        [
            "265,721.00",
            "10,883.93",
            "2.77",
            "0.11",
            "2.29",
            "0.09",
            "0.98",
            "0.04",
        ],
    ),
    (
        8,
        20,
        [
            "265,721.50",
            "10,883.95",
            "3.16",
            "0.13",
            "2.68",
            "0.11",
            "1.34",
            "0.05",
        ],
    ),
    (
        8,
        50,
        [
            "265,723.50",
            "10,884.03",
            "4.90",
            "0.20",
            "4.65",
            "0.19",
            "3.19",
            "0.13",
        ],
    ),
    (
        9,
        10,
        [
            "54,557.50",
            "2,234.68",
            "17.76",
            "0.73",
            "4.13",
            "0.17",
            "2.99",
            "0.12",
        ],
    ),
    (
        9,
        20,
        [
            "54,557.50",
            "2,234.68",
            "17.75",
            "0.72",
            "6.85",
            "0.28",
            "5.57",
            "0.23",
        ],
    ),
    (
        9,
        50,
        [
            "54,575.00",
            "2,235.39",
            "35.14",
            "1.44",
            "21.01",
            "0.86",
            "20.22",
            "0.83",
        ],
    ),
    (
        10,
        10,
        [
            "489,989.00",
            "20,069.95",
            "28.95",
            "1.19",
            "26.12",
            "1.07",
            "3.05",
            "0.12",
        ],
    ),
    (
        10,
        20,
        [
            "489,989.00",
            "20,069.95",
            "29.04",
            "1.19",
            "26.19",
            "1.07",
            "4.92",
            "0.20",
        ],
    ),
    (
        10,
        50,
        [
            "489,989.00",
            "20,069.95",
            "28.98",
            "1.19",
            "26.13",
            "1.07",
            "16.01",
            "0.66",
        ],
    ),
];

/// Published pairs whose latency contradicts their own size at the common
/// bandwidth: (app, level, column, latency the size actually implies).
/// Neighbouring rows show the intended value in each case.
const INCONSISTENT_PAIRS: &[(u32, u32, usize, &str)] = &[
    // 127,517.00 KB; the printed 5,224.10 s is off by one in the thousands.
    (2, 20, 0, "5,223.10"),
    // 8.61 KB is printed for an 18.61 KB upload (0.76 s, as in the 20% row).
    (7, 10, 1, "0.35"),
    // 17.75 KB; the 10% row's 17.76 KB gives the same 0.73 s.
    (9, 20, 1, "0.73"),
];

#[test]
fn latency_formula_reproduction() {
    let link = LinkModel::default();
    let mut exact = 0;
    let mut mismatches = Vec::new();
    for &(app, level, cells) in REFERENCE_ROWS {
        for col in 0..4 {
            let size = DataSize::parse_kb(cells[2 * col]).expect("well-formed size");
            let got = transmission_latency(size, &link).to_string();
            if got == cells[2 * col + 1] {
                exact += 1;
            } else {
                mismatches.push((app, level, col, got));
            }
        }
    }
    let expected: Vec<_> = INCONSISTENT_PAIRS
        .iter()
        .map(|&(a, l, c, s)| (a, l, c, s.to_string()))
        .collect();
    let spot = |kb: &str| transmission_latency(DataSize::parse_kb(kb).unwrap(), &link).to_string();
    let spots_ok =
        spot("48.64") == "1.99" && spot("188,845.50") == "7,735.11" && spot("1.35") == "0.06";
    let ok = REFERENCE_ROWS.len() == 30 && mismatches == expected && spots_ok;
    report(
        "latency formula",
        ok,
        &format!(
            "{exact}/{} published pairs exact after half-up rounding; {} self-inconsistent published pairs differ as catalogued {:?}; spot values {}",
            REFERENCE_ROWS.len() * 4,
            mismatches.len(),
            mismatches,
            if spots_ok { "match" } else { "DIFFER" }
        ),
    );
}

#[test]
fn end_to_end_correctness() {
    let failures: Vec<String> = (0..500u64)
        .into_par_iter()
        .filter_map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xE2E0_0000 + seed);
            let orig = common::random_tree(&mut rng, 200, 256 * 1024);
            let upd = common::mutate(&mut rng, &orig, 256 * 1024);
            let run = || -> Result<bool, String> {
                let bytes = encode_package(&compare_trees(&orig, &upd), &orig, &upd)
                    .map_err(|e| e.to_string())?;
                let pkg = decode_package(&bytes).map_err(|e| e.to_string())?;
                let (out, rep) = apply_package(&orig, &pkg).map_err(|e| e.to_string())?;
                let same = out.digest() == upd.digest()
                    && out
                        .files()
                        .zip(upd.files())
                        .all(|((pa, a), (pb, b))| pa == pb && a.content() == b.content())
                    && out.len() == upd.len();
                Ok(same && rep.verified)
            };
            match run() {
                Ok(true) => None,
                Ok(false) => Some(format!("seed {seed}: output differs")),
                Err(e) => Some(format!("seed {seed}: {e}")),
            }
        })
        .collect();
    report(
        "end-to-end correctness",
        failures.is_empty(),
        &format!(
            "500 random tree pairs, {} failures {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

fn lcs_oracle(a: &[&[u8]], b: &[&[u8]]) -> usize {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            dp[i][j] = if a[i] == b[j] {
                1 + dp[i + 1][j + 1]
            } else {
                dp[i + 1][j].max(dp[i][j + 1])
            };
        }
    }
    dp[0][0]
}

#[test]
fn diff_minimality() {
    let alphabet: [&[u8]; 4] = [b"a\n", b"b\n", b"c\n", b"d"];
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1FF);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(0..=12);
        let m = rng.gen_range(0..=12);
        let k = rng.gen_range(1..=alphabet.len());
        let a: Vec<&[u8]> = (0..n).map(|_| alphabet[rng.gen_range(0..k)]).collect();
        let b: Vec<&[u8]> = (0..m).map(|_| alphabet[rng.gen_range(0..k)]).collect();
        let d = line_diff(&a, &b);
        let cost = d.ops.total(OpKind::Delete) + d.ops.total(OpKind::Insert);
        if cost as usize != n + m - 2 * lcs_oracle(&a, &b) {
            bad += 1;
        }
    }
    report(
        "diff minimality",
        bad == 0,
        &format!("1000 random line-sequence pairs (<= 12 lines), {bad} differ from the quadratic LCS oracle"),
    );
}

struct Fixture {
    orig: FileTree,
    upd: FileTree,
}

fn fixture(seed: u64, target: f64) -> Fixture {
    let orig = sample_app_tree(seed, AppShape::default());
    let upd = generate_variant(
        &orig,
        &VariantSpec::new(target, seed ^ 0xF1).with_scope(p("app")),
    )
    .unwrap();
    Fixture { orig, upd }
}

#[test]
fn size_ordering_and_trend() {
    let levels = [0.10, 0.20, 0.50];
    let mut violations = Vec::new();
    let mut means = Vec::new();
    for &level in &levels {
        let improvements: Vec<f64> = (0..10u64)
            .into_par_iter()
            .map(|seed| {
                let f = fixture(100 + seed, level);
                let cs = compare_trees(&f.orig, &f.upd);
                let ours = encode_package(&cs, &f.orig, &f.upd).unwrap().len() as u64;
                let b = baseline_sizes(&f.upd, &cs, &p("app")).unwrap();
                let ordered =
                    ours <= b.b3_bytes && b.b3_bytes <= b.b2_bytes && b.b2_bytes <= b.b1_bytes;
                (ordered, ours, b, 1.0 - ours as f64 / b.b3_bytes as f64)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .enumerate()
            .map(|(seed, (ordered, ours, b, imp))| {
                if !ordered {
                    violations.push(format!(
                        "{level}/{seed}: ours {ours} b3 {} b2 {} b1 {}",
                        b.b3_bytes, b.b2_bytes, b.b1_bytes
                    ));
                }
                imp
            })
            .collect();
        means.push(improvements.iter().sum::<f64>() / improvements.len() as f64);
    }
    let trend = means.windows(2).all(|w| w[0] > w[1]);
    report(
        "size ordering",
        violations.is_empty() && trend,
        &format!(
            "30 fixtures, {} ordering violations {:?}; mean reduction vs changed-file upload {:.2}% / {:.2}% / {:.2}% at 10/20/50%",
            violations.len(),
            violations,
            means[0] * 100.0,
            means[1] * 100.0,
            means[2] * 100.0
        ),
    );
}

fn hashes(data: &[u8]) -> Vec<Digest> {
    chunkify(data, &ChunkBoundarySpec::default())
        .into_iter()
        .map(|c| c.hash)
        .collect()
}

#[test]
fn chunking_stability() {
    let failures: Vec<String> = (0..100u64)
        .into_par_iter()
        .filter_map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xC0C0 + seed);
            let mut blob = vec![0u8; 1 << 20];
            rng.fill_bytes(&mut blob);
            let before = hashes(&blob);
            let old: HashSet<_> = before.iter().collect();

            let mut flipped = blob.clone();
            let at = rng.gen_range(0..=blob.len() - 64);
            for b in &mut flipped[at..at + 64] {
                *b ^= 0xFF;
            }
            let after = hashes(&flipped);
            let new: HashSet<_> = after.iter().collect();
            let changed = after
                .iter()
                .filter(|h| !old.contains(h))
                .count()
                .max(before.iter().filter(|h| !new.contains(h)).count());
            if changed > 3 {
                return Some(format!("seed {seed}: flip changed {changed} chunks"));
            }

            let mut prepended = Vec::with_capacity(blob.len() + 1);
            prepended.push(rng.gen());
            prepended.extend_from_slice(&blob);
            let shifted = hashes(&prepended);
            if shifted.len() != before.len() || shifted[1..] != before[1..] {
                return Some(format!(
                    "seed {seed}: prepend disturbed chunks past the first boundary"
                ));
            }
            None
        })
        .collect();
    report(
        "chunking stability",
        failures.is_empty(),
        &format!(
            "100 seeds on 1 MiB blobs, {} violations {:?}",
            failures.len(),
            failures
        ),
    );
}

fn sized_tree(bytes: usize, tag: u8) -> FileTree {
    let mut t = FileTree::new("sized");
    t.add_file(p("app/blob.bin"), vec![tag; bytes]).unwrap();
    t
}

#[test]
fn rollback_protocol() {
    let mut notes = Vec::new();

    let f = fixture(7, 0.10);
    let mut stack = LayerStack::new("app");
    stack.commit_layer(f.orig.clone(), "V1.0").unwrap();
    stack.mark_stable("V1.0").unwrap();
    stack.commit_layer(f.upd.clone(), "V1.1").unwrap();
    let cost = |s| stack.recovery_cost_report(s).unwrap();
    let (image, file, patch) = (
        cost(RecoveryStrategy::Image),
        cost(RecoveryStrategy::File),
        cost(RecoveryStrategy::Patch),
    );
    let ordering =
        patch.storage_bytes < file.storage_bytes && file.storage_bytes < image.storage_bytes;
    notes.push(format!(
        "storage patch {} < file {} < image {}: {ordering}",
        patch.storage_bytes, file.storage_bytes, image.storage_bytes
    ));

    let rec = stack
        .on_failure(FailureEvent::new(FailurePhase::PostUpdateExecution, 137, 1).unwrap())
        .unwrap();
    let rolled = stack.active().unwrap().tag == "V1.0"
        && rec.to_tag == "V1.0"
        && !rec.noop
        && stack.active_tree().unwrap().digest() == f.orig.digest()
        && stack.layer("V1.1").unwrap().failed;
    notes.push(format!(
        "exit 137 leaves active={}",
        stack.active().unwrap().tag
    ));

    let mut layer_ops = Vec::new();
    for size in [1usize << 10, 1 << 20, 100 << 20] {
        let mut s = LayerStack::new("sized");
        s.commit_layer(sized_tree(size, 1), "V1.0").unwrap();
        s.mark_stable("V1.0").unwrap();
        s.commit_layer(sized_tree(size, 2), "V1.1").unwrap();
        let c = s.recovery_cost_report(RecoveryStrategy::Layer).unwrap();
        layer_ops.push((c.backup_ops, c.restore_ops, c.storage_bytes));
    }
    let constant = layer_ops.iter().all(|&(b, r, _)| b == 1 && r == 1)
        && layer_ops.windows(2).all(|w| w[0] == w[1]);
    notes.push(format!(
        "layer (backup, restore, bytes) over 1 KiB..100 MiB: {layer_ops:?}"
    ));

    report(
        "rollback protocol",
        ordering && rolled && constant,
        &notes.join("; "),
    );
}

#[test]
fn modification_ratio_metric() {
    let t = sample_app_tree(1, AppShape::default());
    let mut disjoint = FileTree::new("disjoint");
    disjoint
        .add_file(p("other/x.txt"), b"nothing shared\n".to_vec())
        .unwrap();
    let identity = modification_ratio(&t, &t).ratio == 0.0;
    let total = modification_ratio(&t, &disjoint).ratio == 1.0;

    let app = p("app");
    let mut outside = Vec::new();
    let mut worst: f64 = 0.0;
    for &target in &[0.10, 0.20, 0.50] {
        let got: Vec<f64> = (0..10u64)
            .into_par_iter()
            .map(|seed| {
                let f = fixture(200 + seed, target);
                modification_ratio(&f.orig.subtree(&app), &f.upd.subtree(&app)).ratio
            })
            .collect();
        for (seed, r) in got.into_iter().enumerate() {
            worst = worst.max((r - target).abs());
            if (r - target).abs() > 0.05 {
                outside.push(format!("{target}/{seed}: {r:.4}"));
            }
        }
    }
    report(
        "modification ratio",
        identity && total && outside.is_empty(),
        &format!(
            "identity 0: {identity}, disjoint 1: {total}; 30 variants, max deviation {worst:.4}, {} outside +/-0.05 {:?}",
            outside.len(),
            outside
        ),
    );
}

#[derive(Debug, Clone, Copy)]
enum Corruption {
    Truncate,
    GzipFlip,
    ManifestFlip,
    SegmentFlip,
    ManifestFlipResealed,
    SegmentFlipResealed,
}

fn corrupt(bytes: &[u8], how: Corruption, rng: &mut impl Rng) -> Vec<u8> {
    let flip = |buf: &mut Vec<u8>, lo: usize, hi: usize, rng: &mut dyn RngCore| {
        let at = lo + (rng.next_u64() as usize) % (hi - lo);
        buf[at] ^= 1 << (rng.next_u32() % 8);
    };
    match how {
        Corruption::Truncate => bytes[..rng.gen_range(0..bytes.len())].to_vec(),
        Corruption::GzipFlip => {
            let mut out = bytes.to_vec();
            let len = out.len();
            flip(&mut out, 0, len, rng);
            out
        }
        _ => {
            let mut body = decompress_body(bytes).unwrap();
            let mlen = u32::from_be_bytes(body[85..89].try_into().unwrap()) as usize;
            let (lo, hi) = match how {
                Corruption::ManifestFlip | Corruption::ManifestFlipResealed => (89, 89 + mlen),
                _ => (89 + mlen, body.len() - 32),
            };
            flip(&mut body, lo, hi, rng);
            if matches!(
                how,
                Corruption::ManifestFlipResealed | Corruption::SegmentFlipResealed
            ) {
                reseal(&mut body, true);
            }
            compress_body(&body)
        }
    }
}

#[test]
fn atomicity_fuzzing() {
    const KINDS: [Corruption; 6] = [
        Corruption::Truncate,
        Corruption::GzipFlip,
        Corruption::ManifestFlip,
        Corruption::SegmentFlip,
        Corruption::ManifestFlipResealed,
        Corruption::SegmentFlipResealed,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
    let mut bad = Vec::new();
    let mut cases = 0;
    let mut pairs = 0;
    while cases < 200 {
        pairs += 1;
        let orig = common::random_tree(&mut rng, 30, 16 * 1024);
        let upd = common::mutate(&mut rng, &orig, 16 * 1024);
        let cs = compare_trees(&orig, &upd);
        if cs.files_with_new_content().is_empty() {
            continue;
        }
        let bytes = encode_package(&cs, &orig, &upd).unwrap();
        let before = orig.digest();
        for how in KINDS {
            if cases == 200 {
                break;
            }
            cases += 1;
            let damaged = corrupt(&bytes, how, &mut rng);
            let outcome = decode_package(&damaged)
                .map_err(|e| e.to_string())
                .and_then(|pkg| {
                    apply_package(&orig, &pkg)
                        .map(|_| ())
                        .map_err(|e| e.to_string())
                });
            if outcome.is_ok() || orig.digest() != before {
                bad.push(format!("case {cases} {how:?}: {outcome:?}"));
            }
        }
    }
    report(
        "atomicity fuzzing",
        bad.is_empty(),
        &format!(
            "{cases} corrupted packages from {pairs} pairs, {} accepted or altered the base {:?}",
            bad.len(),
            bad
        ),
    );
}
