//! Layered version history with rollback to the last stable layer.
//!
//! Each deployed version of an application is a layer. Only two trees stay
//! materialized: the active layer and the most recent stable layer beneath
//! it. Older layers survive as tag and digest only.
//!
//! On disk a stack is a directory holding `layers.idx` and one subdirectory
//! per materialized layer under `trees/`.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::diffgen::compare_trees;
use crate::fstree::{Digest, FileTree, TreeError};
use crate::package::{encode_package, PackageError};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("tag {0:?} is already used by another layer")]
    DuplicateTag(String),
    #[error("invalid tag {0:?}: use letters, digits, '.', '_' or '-', not starting with '.'")]
    InvalidTag(String),
    #[error("no layer tagged {0:?}")]
    UnknownTag(String),
    #[error("layer {tag:?} is not active (active is {active:?})")]
    NotActive { tag: String, active: Option<String> },
    #[error("exit code 0 does not indicate a failure")]
    NotAFailure,
    #[error("no stable layer to roll back to")]
    Unrecoverable,
    #[error("stack is empty")]
    Empty,
    #[error("cost report needs an active layer and a stable layer beneath it")]
    NoPriorLayer,
    #[error("tree for layer {0:?} is not materialized")]
    NotMaterialized(String),
    #[error("layer store {path}: {reason}")]
    Index { path: PathBuf, reason: String },
    #[error("layer {tag:?} on disk has digest {actual}, index says {expected}")]
    Corrupt {
        tag: String,
        expected: Digest,
        actual: Digest,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Package(#[from] PackageError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LayerError + '_ {
    move |source| LayerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub tag: String,
    pub digest: Digest,
    pub tree: Option<Arc<FileTree>>,
    pub stable: bool,
    pub failed: bool,
}

impl Layer {
    /// Line this layer occupies in the index, including the newline.
    fn index_record(&self, active: bool) -> String {
        format!("{}\t{}\t{}\n", self.tag, self.digest, self.flags(active))
    }

    fn flags(&self, active: bool) -> String {
        let mut f = String::new();
        for (on, c) in [
            (active, 'A'),
            (self.stable, 'S'),
            (self.failed, 'F'),
            (self.tree.is_some(), 'M'),
        ] {
            if on {
                f.push(c);
            }
        }
        if f.is_empty() {
            f.push('-');
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FailurePhase {
    UpdateProcess,
    PostUpdateExecution,
}

impl fmt::Display for FailurePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailurePhase::UpdateProcess => "update",
            FailurePhase::PostUpdateExecution => "post-update",
        })
    }
}

impl FromStr for FailurePhase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "update" => Ok(FailurePhase::UpdateProcess),
            "post-update" => Ok(FailurePhase::PostUpdateExecution),
            _ => Err(format!(
                "unknown phase {s:?}, expected `update` or `post-update`"
            )),
        }
    }
}

/// A non-zero exit observed while updating or running the application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FailureEvent {
    pub phase: FailurePhase,
    pub exit_code: i32,
    pub timestamp: u64,
}

impl FailureEvent {
    pub fn new(phase: FailurePhase, exit_code: i32, timestamp: u64) -> Result<Self, LayerError> {
        if exit_code == 0 {
            return Err(LayerError::NotAFailure);
        }
        Ok(FailureEvent {
            phase,
            exit_code,
            timestamp,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RollbackRecord {
    pub phase: FailurePhase,
    pub exit_code: i32,
    pub timestamp: u64,
    pub from_tag: String,
    pub to_tag: String,
    pub noop: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RecoveryStrategy {
    Image,
    File,
    Patch,
    Layer,
}

impl RecoveryStrategy {
    pub const ALL: [RecoveryStrategy; 4] = [
        RecoveryStrategy::Image,
        RecoveryStrategy::File,
        RecoveryStrategy::Patch,
        RecoveryStrategy::Layer,
    ];
}

/// Modeled backup footprint and work for one recovery strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RecoveryCost {
    pub strategy: RecoveryStrategy,
    pub storage_bytes: u64,
    pub backup_ops: u64,
    pub restore_ops: u64,
}

pub fn validate_tag(tag: &str) -> Result<(), LayerError> {
    let ok = !tag.is_empty()
        && !tag.starts_with('.')
        && tag
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(LayerError::InvalidTag(tag.to_owned()))
    }
}

#[derive(Debug, Clone)]
pub struct LayerStack {
    app_id: String,
    layers: Vec<Layer>,
    active: Option<usize>,
}

impl LayerStack {
    pub fn new(app_id: impl Into<String>) -> Self {
        LayerStack {
            app_id: app_id.into(),
            layers: Vec::new(),
            active: None,
        }
    }

    pub fn app_id(&self) -> &str {
        &self.app_id
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn active(&self) -> Option<&Layer> {
        self.active.map(|i| &self.layers[i])
    }

    pub fn active_index(&self) -> Option<usize> {
        self.active
    }

    pub fn active_tree(&self) -> Option<&FileTree> {
        self.active().and_then(|l| l.tree.as_deref())
    }

    pub fn layer(&self, tag: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.tag == tag)
    }

    /// Index of the newest stable layer.
    pub fn last_stable(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.stable)
    }

    /// Newest stable layer other than the active one: the tree a failure of
    /// the active layer would fall back to, or that a stable active layer
    /// superseded.
    fn fallback(&self) -> Option<usize> {
        self.layers
            .iter()
            .enumerate()
            .rev()
            .find(|&(i, l)| l.stable && Some(i) != self.active)
            .map(|(i, _)| i)
    }

    /// Appends `tree` as a new unstable layer and activates it.
    pub fn commit_layer(&mut self, tree: FileTree, tag: &str) -> Result<(), LayerError> {
        validate_tag(tag)?;
        if self.layer(tag).is_some() {
            return Err(LayerError::DuplicateTag(tag.to_owned()));
        }
        self.layers.push(Layer {
            tag: tag.to_owned(),
            digest: tree.digest(),
            tree: Some(Arc::new(tree)),
            stable: false,
            failed: false,
        });
        self.active = Some(self.layers.len() - 1);
        self.prune();
        Ok(())
    }

    pub fn mark_stable(&mut self, tag: &str) -> Result<(), LayerError> {
        let idx = self
            .layers
            .iter()
            .position(|l| l.tag == tag)
            .ok_or_else(|| LayerError::UnknownTag(tag.to_owned()))?;
        if Some(idx) != self.active {
            return Err(LayerError::NotActive {
                tag: tag.to_owned(),
                active: self.active().map(|l| l.tag.clone()),
            });
        }
        if !self.layers[idx].stable {
            self.layers[idx].stable = true;
            self.layers[idx].failed = false;
            self.prune();
        }
        Ok(())
    }

    /// Rolls back to the newest stable layer. The failed layer stays in the
    /// stack, flagged, for later inspection.
    pub fn on_failure(&mut self, event: FailureEvent) -> Result<RollbackRecord, LayerError> {
        if event.exit_code == 0 {
            return Err(LayerError::NotAFailure);
        }
        let active = self.active.ok_or(LayerError::Empty)?;
        let from_tag = self.layers[active].tag.clone();
        let record = |to_tag: String, noop| RollbackRecord {
            phase: event.phase,
            exit_code: event.exit_code,
            timestamp: event.timestamp,
            from_tag: from_tag.clone(),
            to_tag,
            noop,
        };
        if self.layers[active].stable {
            return Ok(record(from_tag.clone(), true));
        }
        let target = self.last_stable().ok_or(LayerError::Unrecoverable)?;
        if self.layers[target].tree.is_none() {
            return Err(LayerError::NotMaterialized(self.layers[target].tag.clone()));
        }
        self.layers[active].failed = true;
        self.active = Some(target);
        Ok(record(self.layers[target].tag.clone(), false))
    }

    /// Handles queued events in arrival order.
    pub fn handle_failures(
        &mut self,
        events: impl IntoIterator<Item = FailureEvent>,
    ) -> Result<Vec<RollbackRecord>, LayerError> {
        events.into_iter().map(|e| self.on_failure(e)).collect()
    }

    /// Drops trees other than the active layer and its fallback.
    fn prune(&mut self) {
        let keep = [self.active, self.fallback()];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if !keep.contains(&Some(i)) {
                layer.tree = None;
            }
        }
    }

    /// Models what each strategy stores and touches to protect the fallback
    /// version while the active one runs.
    pub fn recovery_cost_report(
        &self,
        strategy: RecoveryStrategy,
    ) -> Result<RecoveryCost, LayerError> {
        let active = self.active.ok_or(LayerError::Empty)?;
        let prior = self.fallback().ok_or(LayerError::NoPriorLayer)?;
        let tree_of = |i: usize| {
            self.layers[i]
                .tree
                .as_deref()
                .ok_or_else(|| LayerError::NotMaterialized(self.layers[i].tag.clone()))
        };
        let (old, new) = (tree_of(prior)?, tree_of(active)?);

        let (storage_bytes, backup_ops, restore_ops) = match strategy {
            RecoveryStrategy::Image => (old.total_file_bytes(), old.len() as u64, 1),
            RecoveryStrategy::File => {
                let saved: Vec<u64> = old
                    .files()
                    .filter(|(p, f)| new.file(p).is_none_or(|g| g.hash() != f.hash()))
                    .map(|(_, f)| f.len() as u64)
                    .collect();
                let added = new.files().filter(|(p, _)| old.file(p).is_none()).count() as u64;
                let n = saved.len() as u64;
                (saved.iter().sum(), n, n + added)
            }
            RecoveryStrategy::Patch => {
                let reverse = compare_trees(new, old);
                let runs = reverse.changed_dirs.len()
                    + reverse.changed_files.len()
                    + reverse
                        .textual_diffs
                        .values()
                        .map(|d| d.ops.len())
                        .sum::<usize>()
                    + reverse
                        .binary_diffs
                        .values()
                        .map(|d| d.ops.len())
                        .sum::<usize>();
                let bytes = encode_package(&reverse, new, old)?.len() as u64;
                (bytes, runs as u64, runs as u64)
            }
            RecoveryStrategy::Layer => (self.layers[prior].index_record(false).len() as u64, 1, 1),
        };
        Ok(RecoveryCost {
            strategy,
            storage_bytes,
            backup_ops,
            restore_ops,
        })
    }
}

const INDEX_FILE: &str = "layers.idx";
const TREES_DIR: &str = "trees";
const INDEX_MAGIC: &str = "satpatch-layers";

/// Directory-backed persistence for a [`LayerStack`].
pub struct LayerStore {
    root: PathBuf,
}

impl LayerStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        LayerStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn exists(&self) -> bool {
        self.root.join(INDEX_FILE).is_file()
    }

    fn tree_dir(&self, tag: &str) -> PathBuf {
        self.root.join(TREES_DIR).join(tag)
    }

    fn bad_index(&self, reason: impl Into<String>) -> LayerError {
        LayerError::Index {
            path: self.root.join(INDEX_FILE),
            reason: reason.into(),
        }
    }

    /// Reads the index and every materialized tree, checking digests.
    pub fn load(&self) -> Result<LayerStack, LayerError> {
        let idx_path = self.root.join(INDEX_FILE);
        let text = fs::read_to_string(&idx_path).map_err(io_err(&idx_path))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| self.bad_index("empty index"))?;
        let app_id = match header.split('\t').collect::<Vec<_>>()[..] {
            [INDEX_MAGIC, "1", app] => app.to_owned(),
            _ => return Err(self.bad_index(format!("bad header {header:?}"))),
        };

        let mut stack = LayerStack::new(app_id);
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let [tag, digest, flags] = fields[..] else {
                return Err(self.bad_index(format!("line {}: expected 3 fields", n + 2)));
            };
            validate_tag(tag)?;
            if stack.layer(tag).is_some() {
                return Err(LayerError::DuplicateTag(tag.to_owned()));
            }
            let digest: Digest = digest
                .parse()
                .map_err(|_| self.bad_index(format!("line {}: bad digest", n + 2)))?;
            if flags.is_empty() || (flags != "-" && !flags.chars().all(|c| "ASFM".contains(c))) {
                return Err(self.bad_index(format!("line {}: bad flags {flags:?}", n + 2)));
            }
            let tree = if flags.contains('M') {
                let tree = FileTree::load_dir(&self.tree_dir(tag))?;
                let actual = tree.digest();
                if actual != digest {
                    return Err(LayerError::Corrupt {
                        tag: tag.to_owned(),
                        expected: digest,
                        actual,
                    });
                }
                Some(Arc::new(tree))
            } else {
                None
            };
            if flags.contains('A') {
                if stack.active.is_some() {
                    return Err(self.bad_index("more than one active layer"));
                }
                stack.active = Some(stack.layers.len());
            }
            stack.layers.push(Layer {
                tag: tag.to_owned(),
                digest,
                tree,
                stable: flags.contains('S'),
                failed: flags.contains('F'),
            });
        }
        if stack.active.is_none() && !stack.layers.is_empty() {
            return Err(self.bad_index("no active layer"));
        }
        Ok(stack)
    }

    /// Writes `stack`. New trees are staged and renamed into place, then the
    /// index is replaced atomically, then trees no longer referenced are
    /// removed.
    pub fn save(&self, stack: &LayerStack) -> Result<(), LayerError> {
        let trees = self.root.join(TREES_DIR);
        fs::create_dir_all(&trees).map_err(io_err(&trees))?;

        for layer in &stack.layers {
            let Some(tree) = &layer.tree else { continue };
            let dir = self.tree_dir(&layer.tag);
            if dir.exists() {
                continue;
            }
            let staging = trees.join(format!(".staging-{}", layer.tag));
            if staging.exists() {
                fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
            }
            tree.materialize(&staging)?;
            fs::rename(&staging, &dir).map_err(io_err(&dir))?;
        }

        let mut index = format!("{INDEX_MAGIC}\t1\t{}\n", stack.app_id);
        for (i, layer) in stack.layers.iter().enumerate() {
            index.push_str(&layer.index_record(Some(i) == stack.active));
        }
        let idx_path = self.root.join(INDEX_FILE);
        let tmp = self.root.join(format!("{INDEX_FILE}.tmp"));
        fs::write(&tmp, index).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &idx_path).map_err(io_err(&idx_path))?;

        for entry in fs::read_dir(&trees).map_err(io_err(&trees))? {
            let entry = entry.map_err(io_err(&trees))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            let keep = stack.layer(&name).is_some_and(|l| l.tree.is_some());
            if !keep {
                fs::remove_dir_all(entry.path()).map_err(io_err(&entry.path()))?;
            }
        }
        Ok(())
    }
}
