//! Shapley attributions for set functions over `M` players.
//!
//! [`exact_shapley`] enumerates all `2^M` coalitions; [`permutation_shapley`]
//! averages marginal contributions over sampled player orderings and then
//! shifts the estimate so it adds up to `v(N) - v(∅)`.
//! [`MaskingOracle`] turns a black-box predictor into a coalition game by
//! swapping absent player groups for background values.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest player count accepted by [`exact_shapley`].
pub const MAX_EXACT_PLAYERS: usize = 20;

/// Permutations evaluated per parallel work unit.
const CHUNK: usize = 64;

/// A pure set function `v(S)`; `coalition[j]` is true when player `j` is in `S`.
pub trait CoalitionOracle: Sync {
    fn players(&self) -> usize;
    fn value(&self, coalition: &[bool]) -> f64;
}

/// Coalition game backed by a closure.
pub struct FnGame<F> {
    players: usize,
    f: F,
}

impl<F: Fn(&[bool]) -> f64 + Sync> FnGame<F> {
    pub fn new(players: usize, f: F) -> Self {
        Self { players, f }
    }
}

impl<F: Fn(&[bool]) -> f64 + Sync> CoalitionOracle for FnGame<F> {
    fn players(&self) -> usize {
        self.players
    }

    fn value(&self, coalition: &[bool]) -> f64 {
        (self.f)(coalition)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Method {
    Exact,
    Permutation { samples: usize, seed: u64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Permutation { .. } => "permutation",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Method::Exact => None,
            Method::Permutation { seed, .. } => Some(*seed),
        }
    }

    pub fn samples(&self) -> Option<usize> {
        match self {
            Method::Exact => None,
            Method::Permutation { samples, .. } => Some(*samples),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyResult {
    /// `v(∅)`
    pub base_value: f64,
    pub phis: Vec<f64>,
    /// `v(N)`
    pub explained_value: f64,
    pub method: Method,
}

impl ShapleyResult {
    /// `base_value + Σ φ - explained_value`.
    pub fn efficiency_gap(&self) -> f64 {
        self.base_value + self.phis.iter().sum::<f64>() - self.explained_value
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.method.name(),
            "seed": self.method.seed(),
            "samples": self.method.samples(),
            "base_value": self.base_value,
            "explained_value": self.explained_value,
            "phis": self.phis,
        })
    }
}

fn mask_to_coalition(mask: u32, m: usize, out: &mut [bool]) {
    for (j, slot) in out.iter_mut().enumerate().take(m) {
        *slot = mask >> j & 1 == 1;
    }
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

/// `|S|! (M - |S| - 1)! / M!` for each coalition size, as `1 / (M · C(M-1, |S|))`.
fn coalition_weights(m: usize) -> Vec<f64> {
    (0..m)
        .map(|s| 1.0 / (m as f64 * binomial(m - 1, s) as f64))
        .collect()
}

/// Exact Shapley values by full coalition enumeration (`2^M` oracle calls).
pub fn exact_shapley<O: CoalitionOracle + ?Sized>(oracle: &O) -> Result<ShapleyResult> {
    let m = oracle.players();
    if m > MAX_EXACT_PLAYERS {
        return Err(Error::Capacity(format!(
            "exact enumeration supports at most {MAX_EXACT_PLAYERS} players, got {m}; use permutation sampling"
        )));
    }
    let values: Vec<f64> = (0..1u32 << m)
        .into_par_iter()
        .map_init(
            || vec![false; m],
            |buf, mask| {
                mask_to_coalition(mask, m, buf);
                oracle.value(buf)
            },
        )
        .collect();
    let weights = coalition_weights(m);
    let phis = (0..m)
        .map(|j| {
            let bit = 1u32 << j;
            (0..1u32 << m)
                .filter(|mask| mask & bit == 0)
                .map(|mask| {
                    let w = weights[mask.count_ones() as usize];
                    w * (values[(mask | bit) as usize] - values[mask as usize])
                })
                .sum()
        })
        .collect();
    Ok(ShapleyResult {
        base_value: values[0],
        phis,
        explained_value: values[(1usize << m) - 1],
        method: Method::Exact,
    })
}

/// Generator for permutation `index`; independent of how work is scheduled.
fn permutation_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Monte-Carlo Shapley estimate over `samples` uniformly drawn orderings,
/// shifted uniformly so that `φ_0 + Σ φ = v(N)`.
pub fn permutation_shapley<O: CoalitionOracle + ?Sized>(
    oracle: &O,
    samples: usize,
    seed: u64,
) -> Result<ShapleyResult> {
    if samples == 0 {
        return Err(Error::Usage(
            "permutation sampling needs at least one sample".into(),
        ));
    }
    let m = oracle.players();
    let empty = oracle.value(&vec![false; m]);
    let full = oracle.value(&vec![true; m]);
    let method = Method::Permutation { samples, seed };
    if m == 0 {
        return Ok(ShapleyResult {
            base_value: empty,
            phis: Vec::new(),
            explained_value: full,
            method,
        });
    }

    let chunks = samples.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut sums = vec![0.0; m];
            let mut order: Vec<usize> = (0..m).collect();
            let mut coalition = vec![false; m];
            for index in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                let mut rng = permutation_rng(seed, index as u64);
                order.sort_unstable();
                order.shuffle(&mut rng);
                coalition.iter_mut().for_each(|p| *p = false);
                let mut prev = empty;
                for (k, &player) in order.iter().enumerate() {
                    coalition[player] = true;
                    let cur = if k + 1 == m {
                        full
                    } else {
                        oracle.value(&coalition)
                    };
                    sums[player] += cur - prev;
                    prev = cur;
                }
            }
            sums
        })
        .collect();

    let mut phis = vec![0.0; m];
    for partial in &partials {
        for (p, s) in phis.iter_mut().zip(partial) {
            *p += s;
        }
    }
    phis.iter_mut().for_each(|p| *p /= samples as f64);
    let shift = (full - empty - phis.iter().sum::<f64>()) / m as f64;
    phis.iter_mut().for_each(|p| *p += shift);
    Ok(ShapleyResult {
        base_value: empty,
        phis,
        explained_value: full,
        method,
    })
}

/// Coalition game over a predictor: players are coordinate groups, present
/// groups take the instance's values and absent ones the background's.
pub struct MaskingOracle<F> {
    predictor: F,
    instance: Vec<f64>,
    background: Vec<f64>,
    groups: Vec<Vec<usize>>,
}

impl<F> MaskingOracle<F> {
    pub fn instance(&self) -> &[f64] {
        &self.instance
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Model input for a coalition.
    pub fn composite(&self, coalition: &[bool]) -> Vec<f64> {
        let mut x = self.background.clone();
        for (group, _) in self
            .groups
            .iter()
            .zip(coalition)
            .filter(|(_, present)| **present)
        {
            for &i in group {
                x[i] = self.instance[i];
            }
        }
        x
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> CoalitionOracle for MaskingOracle<F> {
    fn players(&self) -> usize {
        self.groups.len()
    }

    fn value(&self, coalition: &[bool]) -> f64 {
        (self.predictor)(&self.composite(coalition))
    }
}

pub fn make_masking_oracle<F>(
    predictor: F,
    instance: Vec<f64>,
    background: Vec<f64>,
    groups: Vec<Vec<usize>>,
) -> Result<MaskingOracle<F>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if instance.len() != background.len() {
        return Err(Error::Dimension {
            expected: instance.len(),
            found: background.len(),
        });
    }
    let mut seen = vec![false; instance.len()];
    for group in &groups {
        if group.is_empty() {
            return Err(Error::Usage("empty player group".into()));
        }
        for &i in group {
            match seen.get_mut(i) {
                None => {
                    return Err(Error::Usage(format!(
                        "group coordinate {i} outside an input of length {}",
                        instance.len()
                    )))
                }
                Some(true) => {
                    return Err(Error::Usage(format!(
                        "coordinate {i} appears in two groups"
                    )))
                }
                Some(slot) => *slot = true,
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Usage(format!("coordinate {i} belongs to no group")));
    }
    Ok(MaskingOracle {
        predictor,
        instance,
        background,
        groups,
    })
}
