//! Distortion metrics, the permutation-invariant SI-SDR objective and
//! improvement scores.
//!
//! All ratios carry an `EPS = 1e-8` regularizer in numerator and denominator,
//! so a perfect estimate scores a large finite value instead of infinity.

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EPS: f64 = 1e-8;

/// Largest exhaustive permutation search supported by [`upit`].
pub const MAX_SOURCES: usize = 6;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::invalid(format!(
            "estimate has {} samples, reference has {}",
            est.len(),
            reference.len()
        )));
    }
    let energy = dot(reference, reference);
    if energy <= 0.0 {
        return Err(Error::invalid("reference signal is all zeros"));
    }
    Ok(energy)
}

/// Score reached by an exact estimate whose target projection has energy
/// `energy`: `10 log10((energy + EPS) / EPS)`.
pub fn epsilon_cap(energy: f64) -> f64 {
    10.0 * ((energy + EPS) / EPS).log10()
}

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    si_sdr_with_grad(est, reference).map(|(v, _)| v)
}

/// SI-SDR together with its gradient with respect to `est`.
pub fn si_sdr_with_grad(est: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    let ref_energy = check_pair(est, reference)?;
    let denom_r = ref_energy + EPS;
    let alpha = dot(est, reference) / denom_r;
    let noise: Vec<f64> = est
        .iter()
        .zip(reference)
        .map(|(e, r)| e - alpha * r)
        .collect();
    let target_energy = alpha * alpha * ref_energy + EPS;
    let noise_energy = dot(&noise, &noise) + EPS;
    let value = 10.0 * (target_energy / noise_energy).log10();

    // d|s_t|^2/de = 2 alpha |r|^2 r / R,  d|n|^2/de = 2 n - 2 <r, n> r / R
    let rn = dot(reference, &noise);
    let k = 10.0 / LN_10;
    let grad = noise
        .iter()
        .zip(reference)
        .map(|(&n, &r)| {
            let d_target = 2.0 * alpha * ref_energy * r / denom_r;
            let d_noise = 2.0 * n - 2.0 * rn * r / denom_r;
            k * (d_target / target_energy - d_noise / noise_energy)
        })
        .collect();
    Ok((value, grad))
}

/// Plain (scale-sensitive) signal-to-distortion ratio in dB.
pub fn sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    let energy = check_pair(est, reference)?;
    let err: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| (r - e) * (r - e))
        .sum();
    Ok(10.0 * ((energy + EPS) / (err + EPS)).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    SiSdr,
    Sdr,
}

impl Metric {
    pub fn eval(self, est: &[f64], reference: &[f64]) -> Result<f64> {
        match self {
            Metric::SiSdr => si_sdr(est, reference),
            Metric::Sdr => sdr(est, reference),
        }
    }
}

/// `metric(est, ref) - metric(mix, ref)`.
pub fn improvement(est: &[f64], reference: &[f64], mix: &[f64], metric: Metric) -> Result<f64> {
    Ok(metric.eval(est, reference)? - metric.eval(mix, reference)?)
}

/// Estimate-to-reference assignment chosen by [`upit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationAssignment {
    /// `mapping[k]` is the reference matched with estimate `k`.
    pub mapping: Vec<usize>,
    /// SI-SDR of each matched pair, in estimate order.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpitResult {
    /// `-(1/K) * max_pi sum_k si_sdr(est_k, ref_pi(k))`.
    pub loss: f64,
    pub assignment: PermutationAssignment,
}

/// Advances `perm` to the next lexicographic permutation; `false` at the end.
fn next_permutation(perm: &mut [usize]) -> bool {
    let Some(i) = (1..perm.len()).rev().find(|&i| perm[i - 1] < perm[i]) else {
        return false;
    };
    let j = (i..perm.len())
        .rev()
        .find(|&j| perm[j] > perm[i - 1])
        .unwrap();
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

fn check_sets<T: AsRef<[f64]>>(ests: &[T], refs: &[T]) -> Result<usize> {
    let k = ests.len();
    if k == 0 || refs.len() != k {
        return Err(Error::invalid(format!(
            "need equal, non-zero source counts, got {} estimates and {} references",
            k,
            refs.len()
        )));
    }
    if k > MAX_SOURCES {
        return Err(Error::Unsupported(format!(
            "permutation search over {k} sources (limit {MAX_SOURCES})"
        )));
    }
    Ok(k)
}

/// Utterance-level permutation-invariant SI-SDR loss by exhaustive search.
/// Ties go to the lexicographically smallest mapping.
pub fn upit<T: AsRef<[f64]>>(ests: &[T], refs: &[T]) -> Result<UpitResult> {
    let k = check_sets(ests, refs)?;
    let mut pair = vec![0.0; k * k];
    for (i, e) in ests.iter().enumerate() {
        for (j, r) in refs.iter().enumerate() {
            pair[i * k + j] = si_sdr(e.as_ref(), r.as_ref())?;
        }
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_total = f64::NEG_INFINITY;
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| pair[i * k + j]).sum();
        if total > best_total {
            best_total = total;
            best.clone_from(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let scores = best
        .iter()
        .enumerate()
        .map(|(i, &j)| pair[i * k + j])
        .collect();
    Ok(UpitResult {
        loss: -best_total / k as f64,
        assignment: PermutationAssignment {
            mapping: best,
            scores,
        },
    })
}

/// [`upit`] plus the gradient of the loss with respect to every estimate.
pub fn upit_with_grad<T: AsRef<[f64]>>(
    ests: &[T],
    refs: &[T],
) -> Result<(UpitResult, Vec<Vec<f64>>)> {
    let result = upit(ests, refs)?;
    let k = ests.len() as f64;
    let grads = result
        .assignment
        .mapping
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let (_, g) = si_sdr_with_grad(ests[i].as_ref(), refs[j].as_ref())?;
            Ok(g.into_iter().map(|v| -v / k).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((result, grads))
}
