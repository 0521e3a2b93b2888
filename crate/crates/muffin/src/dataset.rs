//! Turning a raw log, a cache file or a synthetic spec into a
//! [`SequenceDataset`].

use std::path::Path;

use muffin_core::data::{build_sequences, k_core, synth_generate, CoreOrder, InteractionLog, SequenceDataset, SynthSpec};

use crate::cache;
use crate::config::DataSection;
use crate::error::{bail, Result};
use crate::tsv;

/// Exact-duplicate removal, k-core filtering and sequence building.
pub fn prepare(log: &InteractionLog, min_core: usize) -> Result<SequenceDataset> {
    if log.is_empty() {
        bail!(Data, "interaction log is empty");
    }
    let log = log.dedup();
    let filtered = if min_core <= 1 { log } else { k_core(&log, min_core, CoreOrder::UsersFirst)? };
    Ok(build_sequences(&filtered)?)
}

/// Reads either a dataset cache or a TSV log, which is preprocessed with
/// `min_core`.
pub fn load_path(path: &Path, min_core: usize) -> Result<SequenceDataset> {
    if cache::is_cache(path) {
        Ok(cache::load(path)?.dataset)
    } else {
        prepare(&tsv::read_log(path)?, min_core)
    }
}

pub fn from_synth(spec: &SynthSpec, min_core: usize) -> Result<SequenceDataset> {
    prepare(&synth_generate(spec)?.log, min_core)
}

pub fn load(section: &DataSection) -> Result<SequenceDataset> {
    match (&section.input, &section.synth) {
        (Some(path), None) => load_path(path, section.min_core),
        (None, Some(spec)) => from_synth(spec, section.min_core),
        _ => bail!(Config, "data: set exactly one of input and synth"),
    }
}
