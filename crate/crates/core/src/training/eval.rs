use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Float;
use crate::datagen::{Dataset, DatasetItem};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::model::ConSep;
use crate::objectives::{improvement, upit, Metric, PermutationAssignment};

/// Anything that maps a mixture to source estimates.
pub trait Separator {
    fn separate(&self, mixture: &Waveform) -> Result<Vec<Waveform>>;
}

impl<F: Float> Separator for ConSep<F> {
    fn separate(&self, mixture: &Waveform) -> Result<Vec<Waveform>> {
        ConSep::separate(self, mixture)
    }
}

/// Improvement scores of one item under the permutation chosen by SI-SDR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: String,
    /// Mean over sources of SI-SDR(estimate) - SI-SDR(mixture), dB.
    pub si_sdri: f64,
    /// Mean over sources of SDR(estimate) - SDR(mixture), dB.
    pub sdri: f64,
    pub assignment: PermutationAssignment,
}

/// Scores `estimates` against the item's references.
///
/// Signals are compared over the common prefix, so estimates covering only
/// the framing-trimmed part of the mixture are handled.
pub fn score_item(estimates: &[Waveform], item: &DatasetItem) -> Result<ItemScore> {
    if estimates.len() != item.references.len() {
        return Err(Error::invalid(format!(
            "item '{}': {} estimates for {} references",
            item.id,
            estimates.len(),
            item.references.len()
        )));
    }
    let len = estimates
        .iter()
        .map(Waveform::len)
        .chain(std::iter::once(item.mixture.len()))
        .min()
        .unwrap_or(0);
    let ests: Vec<&[f64]> = estimates.iter().map(|e| &e.samples()[..len]).collect();
    let refs: Vec<&[f64]> = item
        .references
        .iter()
        .map(|r| &r.samples()[..len])
        .collect();
    let mix = &item.mixture.samples()[..len];
    let assignment = upit(&ests, &refs)?.assignment;
    let k = ests.len() as f64;
    let mut si_sdri = 0.0;
    let mut sdri = 0.0;
    for (i, &j) in assignment.mapping.iter().enumerate() {
        si_sdri += improvement(ests[i], refs[j], mix, Metric::SiSdr)? / k;
        sdri += improvement(ests[i], refs[j], mix, Metric::Sdr)? / k;
    }
    Ok(ItemScore {
        id: item.id.clone(),
        si_sdri,
        sdri,
        assignment,
    })
}

/// Separates and scores every item; items are processed in parallel and
/// returned in dataset order.
pub fn evaluate<S: Separator + Sync>(separator: &S, data: &Dataset) -> Result<Vec<ItemScore>> {
    data.items()
        .par_iter()
        .map(|item| score_item(&separator.separate(&item.mixture)?, item))
        .collect()
}

/// Per-item scores with their corpus means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub num_items: usize,
    pub mean_si_sdri: f64,
    pub mean_sdri: f64,
    pub items: Vec<ItemScore>,
}

impl EvaluationReport {
    pub fn new(items: Vec<ItemScore>, config_hash: impl Into<String>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("evaluation needs at least one item"));
        }
        let n = items.len() as f64;
        Ok(Self {
            config_hash: config_hash.into(),
            num_items: items.len(),
            mean_si_sdri: items.iter().map(|s| s.si_sdri).sum::<f64>() / n,
            mean_sdri: items.iter().map(|s| s.sdri).sum::<f64>() / n,
            items,
        })
    }
}
