//! Probability tables over `Σ^q` and sample containers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::state::{Configuration, Guard, StateSpace};

const NORMALIZATION_TOL: f64 = 1e-9;

/// Read access shared by exact and empirical distributions.
pub trait Pmf {
    fn space(&self) -> StateSpace;

    fn prob(&self, index: u64) -> f64;

    /// `Some(indices)` when the distribution is known to vanish outside
    /// `indices`; `None` for dense tables.
    fn sparse_support(&self) -> Option<Vec<u64>>;
}

/// A full probability table indexed by mixed-radix state index.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactDistribution {
    space: StateSpace,
    probs: Vec<f64>,
}

impl ExactDistribution {
    /// Wraps an already-normalized table.
    pub fn new(space: StateSpace, probs: Vec<f64>) -> Result<Self> {
        let expected = space.num_states()?;
        if probs.len() as u64 != expected {
            return Err(Error::DimensionMismatch(format!(
                "table has {} entries, state space has {expected}",
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidDistribution(format!("entry {bad}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { space, probs })
    }

    /// Normalizes a table of non-negative weights.
    pub fn from_weights(space: StateSpace, mut weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidDistribution("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(space, weights)
    }

    /// Builds `exp(log_weights) / Z` with a max shift for stability.
    pub fn from_log_weights(space: StateSpace, mut log_weights: Vec<f64>) -> Result<Self> {
        let max = log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("log-weights".into()));
        }
        log_weights.iter_mut().for_each(|w| *w = (*w - max).exp());
        Self::from_weights(space, log_weights)
    }

    pub fn uniform(space: StateSpace, guard: Guard) -> Result<Self> {
        let n = space.table_len(guard)?;
        Ok(Self {
            space,
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn point_mass(space: StateSpace, index: u64, guard: Guard) -> Result<Self> {
        let n = space.table_len(guard)?;
        if index >= n as u64 {
            return Err(Error::IndexOutOfRange {
                index,
                num_states: n as u64,
            });
        }
        let mut probs = vec![0.0; n];
        probs[index as usize] = 1.0;
        Ok(Self { space, probs })
    }

    pub fn from_empirical(emp: &EmpiricalDistribution, guard: Guard) -> Result<Self> {
        let n = emp.space.table_len(guard)?;
        let mut probs = vec![0.0; n];
        for (&idx, &c) in &emp.counts {
            probs[idx as usize] = c as f64 / emp.total as f64;
        }
        Ok(Self {
            space: emp.space,
            probs,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn q(&self) -> usize {
        self.space.q()
    }

    pub fn p(&self) -> usize {
        self.space.p()
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Cumulative table for inversion sampling.
    pub fn sampler(&self) -> TableSampler {
        let mut acc = 0.0;
        let cdf = self
            .probs
            .iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        TableSampler { cdf }
    }
}

/// Cumulative-table inversion sampler over state indices.
#[derive(Clone, Debug)]
pub struct TableSampler {
    cdf: Vec<f64>,
}

impl TableSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let total = *self.cdf.last().unwrap_or(&1.0);
        let target = rng.random::<f64>() * total;
        let idx = self.cdf.partition_point(|&c| c <= target);
        if idx < self.cdf.len() {
            return idx as u64;
        }
        // round-off pushed `target` onto the total: take the last entry with mass
        let mut idx = self.cdf.len() - 1;
        while idx > 0 && self.cdf[idx] == self.cdf[idx - 1] {
            idx -= 1;
        }
        idx as u64
    }
}

impl Pmf for ExactDistribution {
    fn space(&self) -> StateSpace {
        self.space
    }

    fn prob(&self, index: u64) -> f64 {
        self.probs.get(index as usize).copied().unwrap_or(0.0)
    }

    fn sparse_support(&self) -> Option<Vec<u64>> {
        None
    }
}

/// Counts of observed states.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmpiricalDistribution {
    space: StateSpace,
    counts: BTreeMap<u64, u64>,
    total: u64,
}

impl EmpiricalDistribution {
    pub fn from_counts(space: StateSpace, counts: BTreeMap<u64, u64>) -> Result<Self> {
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(Error::Empty("empirical distribution"));
        }
        let n = space.num_states()?;
        if let Some((&idx, _)) = counts.iter().next_back().filter(|(&i, _)| i >= n) {
            return Err(Error::IndexOutOfRange {
                index: idx,
                num_states: n,
            });
        }
        Ok(Self {
            space,
            counts,
            total,
        })
    }

    pub fn counts(&self) -> &BTreeMap<u64, u64> {
        &self.counts
    }

    pub fn count(&self, index: u64) -> u64 {
        self.counts.get(&index).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

impl Pmf for EmpiricalDistribution {
    fn space(&self) -> StateSpace {
        self.space
    }

    fn prob(&self, index: u64) -> f64 {
        self.count(index) as f64 / self.total as f64
    }

    fn sparse_support(&self) -> Option<Vec<u64>> {
        Some(self.counts.keys().copied().collect())
    }
}

/// A set of configurations sharing `(q, p)`, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSet {
    space: StateSpace,
    data: Vec<u8>,
    /// Free-form origin note (generator, seed, ...).
    pub provenance: String,
}

impl SampleSet {
    pub fn new(space: StateSpace, provenance: impl Into<String>) -> Self {
        Self {
            space,
            data: Vec::new(),
            provenance: provenance.into(),
        }
    }

    /// Builds from flat row-major data, validating every row.
    pub fn from_flat(space: StateSpace, data: Vec<u8>, provenance: impl Into<String>) -> Result<Self> {
        if !data.len().is_multiple_of(space.q()) {
            return Err(Error::DimensionMismatch(format!(
                "{} symbols is not a multiple of q = {}",
                data.len(),
                space.q()
            )));
        }
        for row in data.chunks_exact(space.q()) {
            space.validate(row)?;
        }
        Ok(Self {
            space,
            data,
            provenance: provenance.into(),
        })
    }

    pub fn from_rows<I, R>(space: StateSpace, rows: I, provenance: impl Into<String>) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[u8]>,
    {
        let mut set = Self::new(space, provenance);
        for row in rows {
            set.push(row.as_ref())?;
        }
        Ok(set)
    }

    pub fn push(&mut self, row: &[u8]) -> Result<()> {
        self.space.validate(row)?;
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn q(&self) -> usize {
        self.space.q()
    }

    pub fn p(&self) -> usize {
        self.space.p()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.space.q()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        let q = self.space.q();
        &self.data[i * q..(i + 1) * q]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, u8> {
        self.data.chunks_exact(self.space.q())
    }

    pub fn to_configurations(&self) -> Vec<Configuration> {
        self.rows().map(|r| Configuration::new(r.to_vec())).collect()
    }

    pub fn as_flat(&self) -> &[u8] {
        &self.data
    }

    /// Splits off the trailing `n_tail` rows.
    pub fn split_tail(&self, n_tail: usize) -> (SampleSet, SampleSet) {
        let n_head = self.len().saturating_sub(n_tail);
        let cut = n_head * self.q();
        (
            Self {
                space: self.space,
                data: self.data[..cut].to_vec(),
                provenance: self.provenance.clone(),
            },
            Self {
                space: self.space,
                data: self.data[cut..].to_vec(),
                provenance: self.provenance.clone(),
            },
        )
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> SampleSet {
        let cut = n.min(self.len()) * self.q();
        Self {
            space: self.space,
            data: self.data[..cut].to_vec(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Tallies exact multiplicities of the rows in `samples`.
pub fn empirical_from_samples(samples: &SampleSet) -> Result<EmpiricalDistribution> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let space = samples.space();
    space.num_states()?;
    let mut counts = BTreeMap::new();
    for row in samples.rows() {
        *counts.entry(space.encode_unchecked(row)).or_insert(0) += 1;
    }
    EmpiricalDistribution::from_counts(space, counts)
}
