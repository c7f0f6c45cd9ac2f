//! Run configuration file, flag overrides and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use graphrta::graph::io::load_graph_dir;
use graphrta::graph::{DomainPair, LabeledGraph};
use graphrta::train::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

/// Values swept by `ablate`, one list per axis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateAxes {
    pub rho: Vec<f64>,
    /// Budget ratios.
    pub budget: Vec<f64>,
    pub known_count: Vec<usize>,
    pub variant: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_src: Option<PathBuf>,
    pub dataset_tgt: Option<PathBuf>,
    /// Original classes `0..known_count` are known; the rest are unknown.
    pub known_count: Option<usize>,
    pub row_normalize: bool,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub ablate: AblateAxes,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_src: None,
            dataset_tgt: None,
            known_count: None,
            row_normalize: false,
            seeds: vec![0],
            workers: 1,
            out: None,
            train: TrainConfig::default(),
            ablate: AblateAxes::default(),
        }
    }
}

/// Flags that override configuration keys.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Single seed; replaces the configured seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// full, no_mr, no_gr, no_adapt, threshold or threshold:<tau>.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub budget_ratio: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub dataset_src: Option<PathBuf>,
    #[arg(long)]
    pub dataset_tgt: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        if let Some(v) = o.variant {
            self.train.variant = v;
        }
        if let Some(r) = o.rho {
            self.train.rho = r;
        }
        if let Some(b) = o.budget_ratio {
            self.train.budget_ratio = b;
        }
        if let Some(l) = o.lambda {
            self.train.lambda = l;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if o.dataset_src.is_some() {
            self.dataset_src = o.dataset_src.clone();
        }
        if o.dataset_tgt.is_some() {
            self.dataset_tgt = o.dataset_tgt.clone();
        }
    }

    /// Checks everything a training run needs before any work starts.
    pub fn validate_for_training(&self) -> Result<()> {
        let mut problems = self.train.problems();
        if self.dataset_src.is_none() {
            problems.push("dataset_src is required".into());
        }
        if self.dataset_tgt.is_none() {
            problems.push("dataset_tgt is required".into());
        }
        if self.known_count.is_none() {
            problems.push("known_count is required".into());
        }
        if self.seeds.is_empty() {
            problems.push("at least one seed is required".into());
        }
        if self.workers == 0 {
            problems.push("workers must be positive".into());
        }
        if self.out.is_none() {
            problems.push("an output directory (out) is required".into());
        }
        if !problems.is_empty() {
            bail!(UsageError(problems.join("; ")));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        self.out.as_deref().expect("validated")
    }
}

/// Raw source and target graphs as stored on disk.
pub struct RawData {
    pub source: LabeledGraph,
    pub target: LabeledGraph,
}

impl RawData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let load = |p: &Path| {
            let mut g = load_graph_dir(p).with_context(|| format!("loading {}", p.display()))?;
            if cfg.row_normalize {
                g.l2_normalize_rows();
            }
            Ok::<_, anyhow::Error>(g)
        };
        Ok(RawData {
            source: load(cfg.dataset_src.as_deref().expect("validated"))?,
            target: load(cfg.dataset_tgt.as_deref().expect("validated"))?,
        })
    }

    pub fn pair(&self, known_count: usize) -> Result<DomainPair> {
        let known: Vec<usize> = (0..known_count).collect();
        Ok(DomainPair::from_raw(&self.source, &self.target, &known)?)
    }
}

/// Input files hashed into the manifest, in a fixed order.
fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// SHA-256 over the effective configuration and every dataset file, each
/// entry framed as `name NUL length NUL bytes`.
pub fn content_hash(config_json: &str, dirs: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    let mut add = |name: &str, bytes: &[u8]| {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(bytes.len().to_string().as_bytes());
        h.update([0]);
        h.update(bytes);
    };
    add("config", config_json.as_bytes());
    for (i, dir) in dirs.iter().enumerate() {
        for f in dataset_files(dir)? {
            let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
            let name = format!("{i}/{}", f.file_name().unwrap_or_default().to_string_lossy());
            add(&name, &bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub datasets: Vec<PathBuf>,
    pub out: PathBuf,
    pub content_hash: String,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
