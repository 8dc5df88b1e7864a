//! Synthetic corpora: harmonic sources, noise, room responses, mixing and
//! manifest-driven dataset builds.
//!
//! Every generator is a pure function of its spec and seed, so a manifest
//! rebuilds the same corpus bit for bit.

mod corpus;
mod mix;
mod synth;

pub use corpus::{
    build_dataset, read_index, reference_file, BuildSummary, Dataset, DatasetItem, IndexRecord,
    Manifest, INDEX_FILE, MIXTURE_FILE,
};
pub use mix::{measured_snr_db, mix, Mixture, MixtureRecipe, MixtureSource, NoiseSpec, Split};
pub use synth::{
    convolve_truncated, synth_noise, synth_rir, synth_source, NoiseColor, RirSpec, SourceSpec,
    SOURCE_PEAK,
};
