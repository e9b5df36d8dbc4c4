//! Shared plumbing for the CLI commands: corpus loading, on-the-fly
//! featurization, split derivation, and run-manifest bookkeeping.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use emsca::dataset::{assemble, split, SplitSpec};
use emsca::error::{Error, Result};
use emsca::seeding::derive_seed;
use emsca::spectral::{stft_featurize, take_windows, SpectralDataset, StftConfig, TakeStrategy};
use emsca::trace_io::{load_manifest, read_cfile, TraceEntry};

/// Record of one CLI run, written into every output directory. Contains
/// everything needed to reproduce the run: the exact argv and the seed.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub wall_seconds: f64,
}

pub struct RunTracker {
    command: String,
    argv: Vec<String>,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: std::time::Instant,
    started_unix_s: u64,
}

impl RunTracker {
    pub fn new(command: &str, seed: u64) -> Self {
        RunTracker {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: std::time::Instant::now(),
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .unwrap_or_default()
                .as_secs(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `run_manifest.json` into `dir`.
    pub fn finish_dir(self, dir: &Path) -> Result<()> {
        let path = dir.join("run_manifest.json");
        self.finish_at(&path)
    }

    /// Writes the manifest next to a single-file output, named
    /// `<stem>.run_manifest.json`.
    pub fn finish_beside(self, out_file: &Path) -> Result<()> {
        let stem = out_file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let path = out_file.with_file_name(format!("{stem}.run_manifest.json"));
        self.finish_at(&path)
    }

    fn finish_at(self, path: &Path) -> Result<()> {
        let manifest = RunManifest {
            tool: "emsca",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            argv: self.argv,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix_s: self.started_unix_s,
            finished_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .unwrap_or_default()
                .as_secs(),
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Schema(format!("run manifest: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Schema(format!("{e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Manifest entries of a corpus directory, grouped by (device, session) in
/// manifest order.
pub struct Corpus {
    pub root: PathBuf,
    pub groups: BTreeMap<(String, String), Vec<TraceEntry>>,
}

pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let manifest_path = root.join("manifest.json");
    let entries = load_manifest(&manifest_path)?;
    let mut groups: BTreeMap<(String, String), Vec<TraceEntry>> = BTreeMap::new();
    for entry in entries {
        groups
            .entry((entry.meta.device_id.clone(), entry.meta.session_id.clone()))
            .or_default()
            .push(entry);
    }
    Ok(Corpus {
        root: root.to_path_buf(),
        groups,
    })
}

impl Corpus {
    pub fn select(
        &self,
        device: Option<&str>,
        session: Option<&str>,
    ) -> Vec<(&(String, String), &Vec<TraceEntry>)> {
        self.groups
            .iter()
            .filter(|((d, s), _)| {
                device.map(|want| want == d).unwrap_or(true)
                    && session.map(|want| want == s).unwrap_or(true)
            })
            .collect()
    }

    /// Featurizes one (device, session) group into a labeled dataset:
    /// every trace becomes one activity class, in manifest order.
    pub fn featurize_group(
        &self,
        entries: &[TraceEntry],
        stft: &StftConfig,
        windows: usize,
        take: TakeStrategy,
        seed: u64,
    ) -> Result<SpectralDataset> {
        let mut parts = Vec::with_capacity(entries.len());
        for entry in entries {
            let path = self.root.join(&entry.file);
            let trace = read_cfile(&path, entry)?;
            let ds = stft_featurize(&trace, stft)?;
            let ds = take_windows(&ds, windows, take, seed)?;
            parts.push((ds, entry.meta.activity_label.clone()));
        }
        assemble(parts)
    }
}

/// The (device, session) group a command points at; session defaults to the
/// only one present and errors on ambiguity.
pub fn single_group<'c>(
    corpus: &'c Corpus,
    device: &str,
    session: Option<&str>,
) -> Result<(&'c (String, String), &'c Vec<TraceEntry>)> {
    let matches = corpus.select(Some(device), session);
    match matches.len() {
        0 => Err(Error::Argument(format!(
            "no traces for device {device:?}{}",
            session.map(|s| format!(" session {s:?}")).unwrap_or_default()
        ))),
        1 => Ok(matches.into_iter().next().unwrap()),
        n => Err(Error::Argument(format!(
            "device {device:?} matches {n} sessions; pass --session"
        ))),
    }
}

/// Deterministic train/test split for one dataset keyed by its group name.
pub fn split_for(
    ds: &SpectralDataset,
    key: &str,
    test_fraction: f64,
    seed: u64,
) -> Result<(SpectralDataset, SpectralDataset)> {
    split(
        ds,
        &SplitSpec {
            test_fraction,
            stratified: true,
            seed: derive_seed(seed, &["split", key]),
        },
    )
}
