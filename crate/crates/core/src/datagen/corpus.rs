use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Component, Path};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mix::{measured_snr_db, mix, MixtureRecipe, Split};
use crate::dsp::{wav_read, wav_write, Waveform};
use crate::error::{Error, Result};

/// Name of the JSON-lines index at the corpus root.
pub const INDEX_FILE: &str = "index.jsonl";
/// Name of the mixture file inside each recipe directory.
pub const MIXTURE_FILE: &str = "mix.wav";

/// File name of reference `k` (0-based): `s1.wav`, `s2.wav`, ...
pub fn reference_file(k: usize) -> String {
    format!("s{}.wav", k + 1)
}

/// Recipes to render, in index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(rename = "recipe", default)]
    pub recipes: Vec<MixtureRecipe>,
}

impl Manifest {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::format(e.to_string()))?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Checks every recipe, that paths are unique, relative and free of
    /// `..`, and that recipe seeds are unique.
    ///
    /// A repeated path is reported as an I/O error (`AlreadyExists`) naming
    /// the path.
    pub fn validate(&self) -> Result<()> {
        if self.recipes.is_empty() {
            return Err(Error::invalid("manifest has no recipes"));
        }
        let mut paths = std::collections::HashSet::new();
        let mut seeds = std::collections::HashSet::new();
        for r in &self.recipes {
            r.validate()?;
            let p = Path::new(&r.path);
            let safe =
                !r.path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
            if !safe {
                return Err(Error::invalid(format!(
                    "recipe path '{}' must be relative without '..'",
                    r.path
                )));
            }
            if !paths.insert(p.to_path_buf()) {
                return Err(Error::io(
                    p,
                    std::io::Error::new(
                        std::io::ErrorKind::AlreadyExists,
                        "duplicate output path in manifest",
                    ),
                ));
            }
            if !seeds.insert(r.seed) {
                return Err(Error::invalid(format!(
                    "recipe seed {} is used more than once",
                    r.seed
                )));
            }
        }
        Ok(())
    }
}

/// One line of the corpus index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRecord {
    /// Recipe directory relative to the corpus root; doubles as the item id.
    pub path: String,
    pub split: Split,
    /// Mixture file relative to the corpus root.
    pub mixture: String,
    /// Reference files relative to the corpus root, in source order.
    pub references: Vec<String>,
    pub sample_rate: u32,
    pub samples: usize,
    /// Requested SNR, when the recipe adds noise.
    pub snr_db: Option<f64>,
    /// SNR measured on the rendered signals.
    pub measured_snr_db: Option<f64>,
    /// Per-source reverberation time (absent for dry sources).
    pub t60: Vec<Option<f64>>,
    /// Recipe seed followed by the source seeds.
    pub seeds: Vec<u64>,
    /// Global gain applied against clipping.
    pub normalization: f64,
    pub recipe: MixtureRecipe,
}

/// Counts returned by [`build_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BuildSummary {
    pub mixtures: usize,
    pub wav_files: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

fn join(a: &str, b: &str) -> String {
    format!("{}/{}", a.trim_end_matches('/'), b)
}

fn render(recipe: &MixtureRecipe, out_dir: &Path) -> Result<IndexRecord> {
    let rendered = mix(recipe)?;
    let dir = out_dir.join(&recipe.path);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    wav_write(dir.join(MIXTURE_FILE), &rendered.mixture)?;
    let mut references = Vec::with_capacity(rendered.references.len());
    for (k, r) in rendered.references.iter().enumerate() {
        wav_write(dir.join(reference_file(k)), r)?;
        references.push(join(&recipe.path, &reference_file(k)));
    }
    Ok(IndexRecord {
        path: recipe.path.clone(),
        split: recipe.split,
        mixture: join(&recipe.path, MIXTURE_FILE),
        references,
        sample_rate: recipe.sample_rate,
        samples: rendered.mixture.len(),
        snr_db: recipe.noise.as_ref().map(|n| n.snr_db),
        measured_snr_db: measured_snr_db(&rendered),
        t60: recipe
            .sources
            .iter()
            .map(|s| s.rir.as_ref().map(|r| r.t60))
            .collect(),
        seeds: std::iter::once(recipe.seed)
            .chain(recipe.sources.iter().map(|s| s.source.seed))
            .collect(),
        normalization: rendered.normalization,
        recipe: recipe.clone(),
    })
}

/// Renders every recipe under `out_dir` and writes the index.
///
/// Recipes are rendered in parallel on the current rayon pool; the index is
/// written afterwards in manifest order, so the output does not depend on
/// the thread count.
pub fn build_dataset(manifest: &Manifest, out_dir: &Path) -> Result<BuildSummary> {
    manifest.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records: Vec<IndexRecord> = manifest
        .recipes
        .par_iter()
        .map(|r| render(r, out_dir))
        .collect::<Result<_>>()?;

    let index_path = out_dir.join(INDEX_FILE);
    let file = File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut w = BufWriter::new(file);
    let mut summary = BuildSummary::default();
    for rec in &records {
        let line = serde_json::to_string(rec).expect("index record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(&index_path, e))?;
        summary.mixtures += 1;
        summary.wav_files += 1 + rec.references.len();
        match rec.split {
            Split::Train => summary.train += 1,
            Split::Valid => summary.valid += 1,
            Split::Test => summary.test += 1,
        }
    }
    w.flush().map_err(|e| Error::io(&index_path, e))?;
    Ok(summary)
}

/// Parses the index of the corpus rooted at `root`.
pub fn read_index(root: &Path) -> Result<Vec<IndexRecord>> {
    let path = root.join(INDEX_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub mixture: Waveform,
    pub references: Vec<Waveform>,
}

impl DatasetItem {
    pub fn new(
        id: impl Into<String>,
        mixture: Waveform,
        references: Vec<Waveform>,
    ) -> Result<Self> {
        let id = id.into();
        if references.is_empty() {
            return Err(Error::format(format!("item '{id}' has no references")));
        }
        for r in &references {
            if r.len() != mixture.len() || r.sample_rate() != mixture.sample_rate() {
                return Err(Error::format(format!(
                    "item '{id}': reference and mixture lengths or rates differ"
                )));
            }
        }
        Ok(Self {
            id,
            mixture,
            references,
        })
    }
}

/// In-memory examples of one split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn from_items(items: Vec<DatasetItem>) -> Self {
        Self { items }
    }

    /// Loads every indexed item of `split` from the corpus at `root`.
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let mut items = Vec::new();
        for rec in read_index(root)?.into_iter().filter(|r| r.split == split) {
            let mixture = wav_read(root.join(&rec.mixture))?;
            let references = rec
                .references
                .iter()
                .map(|p| wav_read(root.join(p)))
                .collect::<Result<Vec<_>>>()?;
            items.push(DatasetItem::new(rec.path, mixture, references)?);
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
