//! `satpatch`: build, inspect and apply delta packages for application trees,
//! and manage the onboard layer store.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid input, 3 apply or verification
//! failure, 4 a rollback was performed.

mod output;
mod store;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use satpatch_core::corpusgen::{generate_variant, VariantSpec};
use satpatch_core::diffgen::{compare_trees_with, ChunkBoundarySpec};
use satpatch_core::fstree::{Digest, FileTree, RelPath};
use satpatch_core::layerstore::{
    FailureEvent, FailurePhase, LayerStack, LayerStore, RecoveryStrategy,
};
use satpatch_core::linksim::{
    baseline_sizes, modification_ratio, schedule_upload, transmission_latency, DataSize, LinkModel,
    Schedule,
};
use satpatch_core::package::{decode_package, encode_package};
use satpatch_core::reconstruct::apply_package;

use output::{Failure, Outcome};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_APPLY: u8 = 3;
pub const EXIT_ROLLBACK: u8 = 4;

const CHUNK_SPEC_ENV: &str = "SATPATCH_CHUNK_SPEC";

#[derive(Parser)]
#[command(
    name = "satpatch",
    version,
    about = "Delta updates for containerized application trees"
)]
struct Cli {
    /// Emit machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the delta package that turns ORIG into UPD.
    Diff {
        orig: PathBuf,
        upd: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Rebuild the updated tree from ORIG and a package into a new directory.
    Apply {
        orig: PathBuf,
        package: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print a tree's digest, or check it against an expected one.
    Verify {
        tree: PathBuf,
        #[arg(long)]
        digest: Option<String>,
    },
    /// Uplink latency of a package file, and optionally a pass schedule.
    Estimate {
        package: PathBuf,
        #[arg(long, default_value_t = 200)]
        bandwidth_kbps: u64,
        /// File with one `start_seconds duration_seconds` pair per line.
        #[arg(long)]
        windows: Option<PathBuf>,
    },
    /// Compare the delta package against whole-image, application-layer and
    /// changed-file uploads.
    Bench {
        orig: PathBuf,
        upd: PathBuf,
        #[arg(long, default_value = "app")]
        app_prefix: String,
        #[arg(long, default_value_t = 200)]
        bandwidth_kbps: u64,
    },
    /// Record TREE as a new, not yet stable layer and make it active.
    Commit {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        tag: String,
        /// Application id used when the store is created.
        #[arg(long)]
        app: Option<String>,
        tree: PathBuf,
    },
    /// Mark the active layer as stable.
    MarkStable {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        tag: String,
    },
    /// Report a failure exit code; rolls back to the last stable layer.
    Rollback {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        exit_code: i32,
        /// `update` or `post-update`.
        #[arg(long, default_value = "post-update")]
        phase: FailurePhase,
        /// Seconds since the epoch; defaults to now.
        #[arg(long)]
        timestamp: Option<u64>,
    },
    /// Show the layer stack and modeled recovery costs.
    Layers {
        #[arg(long)]
        store: PathBuf,
    },
    /// Write a synthetic update of IN whose modification ratio reaches RATIO.
    GenVariant {
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        seed: u64,
        /// Only edit (and measure) beneath this path.
        #[arg(long)]
        scope: Option<String>,
        /// Share of edit steps that may flip bytes in binary files.
        #[arg(long, default_value_t = 0.0)]
        binary_share: f64,
        input: PathBuf,
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let name = command_name(&cli.command);
    let result = run(cli.command);
    output::emit(name, cli.json, result)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Diff { .. } => "diff",
        Command::Apply { .. } => "apply",
        Command::Verify { .. } => "verify",
        Command::Estimate { .. } => "estimate",
        Command::Bench { .. } => "bench",
        Command::Commit { .. } => "commit",
        Command::MarkStable { .. } => "mark-stable",
        Command::Rollback { .. } => "rollback",
        Command::Layers { .. } => "layers",
        Command::GenVariant { .. } => "gen-variant",
    }
}

fn input_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::new(EXIT_INPUT, e.into())
}

fn apply_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::new(EXIT_APPLY, e.into())
}

fn load_tree(path: &Path) -> Result<FileTree, Failure> {
    FileTree::load(path)
        .with_context(|| format!("cannot load tree {}", path.display()))
        .map_err(input_err)
}

fn chunk_spec() -> Result<ChunkBoundarySpec, Failure> {
    match std::env::var(CHUNK_SPEC_ENV) {
        Ok(v) => ChunkBoundarySpec::parse(&v)
            .with_context(|| format!("{CHUNK_SPEC_ENV}={v:?}"))
            .map_err(input_err),
        Err(_) => Ok(ChunkBoundarySpec::default()),
    }
}

fn link(bandwidth_kbps: u64) -> Result<LinkModel, Failure> {
    LinkModel::new(bandwidth_kbps.saturating_mul(1000)).map_err(input_err)
}

fn require_absent(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        return Err(input_err(anyhow!("{} already exists", path.display())));
    }
    Ok(())
}

fn rel(s: &str) -> Result<RelPath, Failure> {
    RelPath::new(s).map_err(input_err)
}

fn run(command: Command) -> Result<Outcome, Failure> {
    match command {
        Command::Diff { orig, upd, output } => diff(&orig, &upd, &output),
        Command::Apply {
            orig,
            package,
            output,
        } => apply(&orig, &package, &output),
        Command::Verify { tree, digest } => verify(&tree, digest.as_deref()),
        Command::Estimate {
            package,
            bandwidth_kbps,
            windows,
        } => estimate(&package, bandwidth_kbps, windows.as_deref()),
        Command::Bench {
            orig,
            upd,
            app_prefix,
            bandwidth_kbps,
        } => bench(&orig, &upd, &app_prefix, bandwidth_kbps),
        Command::Commit {
            store,
            tag,
            app,
            tree,
        } => commit(&store, &tag, app, &tree),
        Command::MarkStable { store, tag } => mark_stable(&store, &tag),
        Command::Rollback {
            store,
            exit_code,
            phase,
            timestamp,
        } => rollback(&store, exit_code, phase, timestamp),
        Command::Layers { store } => layers(&store),
        Command::GenVariant {
            ratio,
            seed,
            scope,
            binary_share,
            input,
            output,
        } => gen_variant(ratio, seed, scope.as_deref(), binary_share, &input, &output),
    }
}

fn diff(orig: &Path, upd: &Path, output: &Path) -> Result<Outcome, Failure> {
    let spec = chunk_spec()?;
    let (a, b) = (load_tree(orig)?, load_tree(upd)?);
    let cs = compare_trees_with(&a, &b, &spec);
    let bytes = encode_package(&cs, &a, &b).map_err(input_err)?;
    store::write_file_atomic(output, &bytes).map_err(input_err)?;
    let size = DataSize::from_bytes(bytes.len() as u64);
    Ok(Outcome::ok(
        format!(
            "wrote {} ({} bytes, {} KB): {} dirs, {} files added/removed, {} textual and {} binary diffs",
            output.display(),
            bytes.len(),
            size.kb_string(),
            cs.changed_dirs.len(),
            cs.changed_files.len(),
            cs.textual_diffs.len(),
            cs.binary_diffs.len()
        ),
        json!({
            "package": output,
            "package_bytes": bytes.len(),
            "size_kb": size.kb_string(),
            "chunk_spec": spec.to_string(),
            "source_digest": a.digest(),
            "target_digest": b.digest(),
            "changed_dirs": cs.changed_dirs.len(),
            "changed_files": cs.changed_files.len(),
            "textual_diffs": cs.textual_diffs.len(),
            "binary_diffs": cs.binary_diffs.len(),
        }),
    ))
}

fn apply(orig: &Path, package: &Path, output: &Path) -> Result<Outcome, Failure> {
    require_absent(output)?;
    let base = load_tree(orig)?;
    let bytes = fs::read(package)
        .with_context(|| format!("cannot read {}", package.display()))
        .map_err(input_err)?;
    let pkg = decode_package(&bytes)
        .with_context(|| format!("rejected package {}", package.display()))
        .map_err(apply_err)?;
    let (tree, report) = apply_package(&base, &pkg).map_err(apply_err)?;
    store::materialize_atomic(&tree, output).map_err(input_err)?;
    Ok(Outcome::ok(
        format!(
            "wrote {}: +{} -{} ~{} files, +{} -{} dirs, digest {} verified",
            output.display(),
            report.files_added,
            report.files_deleted,
            report.files_patched,
            report.dirs_added,
            report.dirs_deleted,
            tree.digest()
        ),
        json!({ "output": output, "digest": tree.digest(), "report": report }),
    ))
}

fn verify(tree: &Path, expected: Option<&str>) -> Result<Outcome, Failure> {
    let expected: Option<Digest> = expected
        .map(|s| {
            s.parse()
                .map_err(|e| input_err(anyhow!("bad digest {s:?}: {e}")))
        })
        .transpose()?;
    let actual = load_tree(tree)?.digest();
    match expected {
        Some(e) if e != actual => Err(apply_err(anyhow!(
            "digest mismatch: {} is {actual}, expected {e}",
            tree.display()
        ))),
        _ => Ok(Outcome::ok(
            match expected {
                Some(_) => format!("{actual} OK"),
                None => actual.to_string(),
            },
            json!({ "digest": actual, "matches": expected.map(|e| e == actual) }),
        )),
    }
}

fn schedule_json(s: &Schedule) -> serde_json::Value {
    match s {
        Schedule::Delivered {
            passes,
            completion_s,
        } => {
            json!({ "status": "delivered", "passes": passes, "completion_s": completion_s.to_string() })
        }
        Schedule::Undeliverable {
            capacity_bits,
            required_bits,
        } => json!({
            "status": "undeliverable",
            "capacity_bits": capacity_bits.to_string(),
            "required_bits": required_bits.to_string(),
        }),
    }
}

fn estimate(
    package: &Path,
    bandwidth_kbps: u64,
    windows: Option<&Path>,
) -> Result<Outcome, Failure> {
    let mut model = link(bandwidth_kbps)?;
    if let Some(w) = windows {
        model = model
            .with_windows(store::read_windows(w)?)
            .map_err(input_err)?;
    }
    let len = fs::metadata(package)
        .with_context(|| format!("cannot stat {}", package.display()))
        .map_err(input_err)?
        .len();
    let size = DataSize::from_bytes(len);
    let latency = transmission_latency(size, &model);
    let mut text = output::table(
        &[["strategy", "size (KB)", "latency (s)"].map(String::from)],
        &[["package".to_string(), size.kb_string(), latency.to_string()]],
    );
    let mut js = json!({
        "package_bytes": len,
        "size_kb": size.kb_string(),
        "latency_s": latency.to_string(),
        "bandwidth_bps": model.bandwidth_bps(),
    });
    if windows.is_some() {
        let s = schedule_upload(size, &model).map_err(input_err)?;
        text.push_str(&match &s {
            Schedule::Delivered {
                passes,
                completion_s,
            } => {
                format!("\ndelivered in {passes} pass(es), complete at t={completion_s} s")
            }
            Schedule::Undeliverable { capacity_bits, .. } => {
                format!("\nundeliverable: windows carry only {capacity_bits} bits")
            }
        });
        js["schedule"] = schedule_json(&s);
    }
    Ok(Outcome::ok(text, js))
}

fn bench(
    orig: &Path,
    upd: &Path,
    app_prefix: &str,
    bandwidth_kbps: u64,
) -> Result<Outcome, Failure> {
    let model = link(bandwidth_kbps)?;
    let spec = chunk_spec()?;
    let prefix = rel(app_prefix)?;
    let (a, b) = (load_tree(orig)?, load_tree(upd)?);
    let cs = compare_trees_with(&a, &b, &spec);
    let ours = encode_package(&cs, &a, &b).map_err(input_err)?.len() as u64;
    let base = baseline_sizes(&b, &cs, &prefix).map_err(input_err)?;
    let ratio = modification_ratio(&a, &b);

    let rows: Vec<(&str, u64)> = vec![
        ("image (B1)", base.b1_bytes),
        ("app layer (B2)", base.b2_bytes),
        ("changed files (B3)", base.b3_bytes),
        ("delta package", ours),
    ];
    let improvement = |other: u64| {
        if other == 0 {
            0.0
        } else {
            100.0 * (1.0 - ours as f64 / other as f64)
        }
    };
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|&(name, bytes)| {
            let size = DataSize::from_bytes(bytes);
            [
                name.to_string(),
                size.kb_string(),
                transmission_latency(size, &model).to_string(),
                if bytes == ours {
                    "-".to_string()
                } else {
                    format!("{:.2}%", improvement(bytes))
                },
            ]
        })
        .collect();
    let mut text = output::table(
        &[["strategy", "size (KB)", "latency (s)", "delta saves"].map(String::from)],
        &body,
    );
    text.push_str(&format!("\nmodification ratio {:.4}", ratio.ratio));

    let js_rows: Vec<_> = rows
        .iter()
        .map(|&(name, bytes)| {
            let size = DataSize::from_bytes(bytes);
            json!({
                "strategy": name,
                "bytes": bytes,
                "size_kb": size.kb_string(),
                "latency_s": transmission_latency(size, &model).to_string(),
            })
        })
        .collect();
    Ok(Outcome::ok(
        text,
        json!({
            "rows": js_rows,
            "improvement_pct": {
                "vs_b1": improvement(base.b1_bytes),
                "vs_b2": improvement(base.b2_bytes),
                "vs_b3": improvement(base.b3_bytes),
            },
            "modification_ratio": ratio,
            "bandwidth_bps": model.bandwidth_bps(),
        }),
    ))
}

fn open_store(path: &Path) -> Result<(LayerStore, LayerStack), Failure> {
    let s = LayerStore::new(path);
    if !s.exists() {
        return Err(input_err(anyhow!("no layer store at {}", path.display())));
    }
    let stack = s.load().map_err(input_err)?;
    Ok((s, stack))
}

fn commit(path: &Path, tag: &str, app: Option<String>, tree: &Path) -> Result<Outcome, Failure> {
    let tree = load_tree(tree)?;
    let (s, mut stack) = if LayerStore::new(path).exists() {
        open_store(path)?
    } else {
        let app = app.unwrap_or_else(|| {
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "app".into())
        });
        (LayerStore::new(path), LayerStack::new(app))
    };
    let digest = tree.digest();
    stack.commit_layer(tree, tag).map_err(input_err)?;
    s.save(&stack).map_err(input_err)?;
    Ok(Outcome::ok(
        format!("committed {tag} ({digest}) as active, not yet stable"),
        json!({ "tag": tag, "digest": digest, "layers": stack.layers().len() }),
    ))
}

fn mark_stable(path: &Path, tag: &str) -> Result<Outcome, Failure> {
    let (s, mut stack) = open_store(path)?;
    stack.mark_stable(tag).map_err(input_err)?;
    s.save(&stack).map_err(input_err)?;
    Ok(Outcome::ok(
        format!("{tag} is stable"),
        json!({ "tag": tag, "stable": true }),
    ))
}

fn rollback(
    path: &Path,
    exit_code: i32,
    phase: FailurePhase,
    timestamp: Option<u64>,
) -> Result<Outcome, Failure> {
    let ts = timestamp.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });
    let event = FailureEvent::new(phase, exit_code, ts).map_err(input_err)?;
    let (s, mut stack) = open_store(path)?;
    let record = stack.on_failure(event).map_err(input_err)?;
    s.save(&stack).map_err(input_err)?;
    let text = if record.noop {
        format!(
            "{} is already stable; nothing to roll back",
            record.from_tag
        )
    } else {
        format!(
            "rolled back {} -> {} after exit {exit_code} during {phase}",
            record.from_tag, record.to_tag
        )
    };
    let code = if record.noop { 0 } else { EXIT_ROLLBACK };
    Ok(Outcome::with_code(code, text, json!({ "record": record })))
}

fn layers(path: &Path) -> Result<Outcome, Failure> {
    let (_, stack) = open_store(path)?;
    let active = stack.active_index();
    let body: Vec<[String; 4]> = stack
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut flags = Vec::new();
            if Some(i) == active {
                flags.push("active");
            }
            if l.stable {
                flags.push("stable");
            }
            if l.failed {
                flags.push("failed");
            }
            [
                l.tag.clone(),
                l.digest.to_string()[..16].to_string(),
                flags.join(","),
                if l.tree.is_some() {
                    "stored"
                } else {
                    "digest only"
                }
                .to_string(),
            ]
        })
        .collect();
    let mut text = output::table(
        &[["tag", "digest", "state", "tree"].map(String::from)],
        &body,
    );
    let costs: Vec<_> = RecoveryStrategy::ALL
        .iter()
        .filter_map(|&s| stack.recovery_cost_report(s).ok())
        .collect();
    if !costs.is_empty() {
        let rows: Vec<[String; 4]> = costs
            .iter()
            .map(|c| {
                [
                    format!("{:?}", c.strategy),
                    DataSize::from_bytes(c.storage_bytes).kb_string(),
                    c.backup_ops.to_string(),
                    c.restore_ops.to_string(),
                ]
            })
            .collect();
        text.push('\n');
        text.push_str(&output::table(
            &[["recovery", "storage (KB)", "backup ops", "restore ops"].map(String::from)],
            &rows,
        ));
    }
    let js_layers: Vec<_> = stack
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            json!({
                "tag": l.tag,
                "digest": l.digest,
                "active": Some(i) == active,
                "stable": l.stable,
                "failed": l.failed,
                "materialized": l.tree.is_some(),
            })
        })
        .collect();
    Ok(Outcome::ok(
        text,
        json!({ "app_id": stack.app_id(), "layers": js_layers, "recovery_costs": costs }),
    ))
}

fn gen_variant(
    ratio: f64,
    seed: u64,
    scope: Option<&str>,
    binary_share: f64,
    input: &Path,
    output: &Path,
) -> Result<Outcome, Failure> {
    require_absent(output)?;
    let orig = load_tree(input)?;
    let mut spec = VariantSpec::new(ratio, seed);
    spec.binary_edit_share = binary_share;
    if let Some(s) = scope {
        spec = spec.with_scope(rel(s)?);
    }
    let variant = generate_variant(&orig, &spec).map_err(input_err)?;
    let measured = match &spec.scope {
        Some(s) => modification_ratio(&orig.subtree(s), &variant.subtree(s)),
        None => modification_ratio(&orig, &variant),
    };
    store::materialize_atomic(&variant, output).map_err(input_err)?;
    Ok(Outcome::ok(
        format!(
            "wrote {} with modification ratio {:.4} (target {ratio})",
            output.display(),
            measured.ratio
        ),
        json!({ "output": output, "target_ratio": ratio, "seed": seed, "measured": measured, "digest": variant.digest() }),
    ))
}
