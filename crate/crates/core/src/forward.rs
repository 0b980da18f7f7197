//! Round-robin forward noising.
//!
//! Kernel `k_n` (for `n = 0..T`) maps `μ_n` to `μ_{n+1}` and touches only
//! site `u = (n mod q) + 1`: that site keeps its symbol with probability
//! `b = (1-ε)/p + ε` and moves to each other symbol with probability
//! `a = (1-ε)/p`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{ExactDistribution, Pmf, SampleSet};
use crate::error::{Error, Result};
use crate::metrics::tv_exact;
use crate::models::{exact_distribution_guarded, EnergyModel};
use crate::state::{Configuration, Guard, Site, StateSpace};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub q: usize,
    pub p: usize,
    /// Total number of forward steps `T`.
    pub steps: usize,
    /// Probability of leaving the selected site untouched.
    pub epsilon: f64,
}

impl NoiseSchedule {
    pub fn new(q: usize, p: usize, steps: usize, epsilon: f64) -> Result<Self> {
        StateSpace::new(q, p)?;
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidParameter(format!("epsilon {epsilon} outside [0, 1]")));
        }
        Ok(Self { q, p, steps, epsilon })
    }

    /// Schedule with `T = sweeps * q`.
    pub fn with_sweeps(q: usize, p: usize, sweeps: usize, epsilon: f64) -> Result<Self> {
        Self::new(q, p, sweeps * q, epsilon)
    }

    pub fn space(&self) -> StateSpace {
        StateSpace::new(self.q, self.p).expect("validated at construction")
    }

    /// Probability of moving to one specific other symbol.
    pub fn a(&self) -> f64 {
        (1.0 - self.epsilon) / self.p as f64
    }

    /// Probability of keeping the current symbol.
    pub fn b(&self) -> f64 {
        (1.0 - self.epsilon) / self.p as f64 + self.epsilon
    }

    /// Site noised by kernel `k_n`.
    pub fn coordinate_at(&self, n: usize) -> Result<Site> {
        if n >= self.steps {
            return Err(Error::InvalidParameter(format!(
                "step {n} outside 0..{}",
                self.steps
            )));
        }
        Ok(self.site_at(n))
    }

    /// Same as [`coordinate_at`](Self::coordinate_at) without the range check.
    #[inline]
    pub fn site_at(&self, n: usize) -> Site {
        Site::from_index(n % self.q)
    }
}

/// Row `k_n(·, from)` restricted to the fibre `N_u(from)`, indexed by the
/// symbol placed at site `u`.
pub fn forward_kernel_row(schedule: &NoiseSchedule, n: usize, from: &[u8]) -> Result<Vec<f64>> {
    let site = schedule.coordinate_at(n)?;
    schedule.space().validate(from)?;
    let mut row = vec![schedule.a(); schedule.p];
    row[from[site.index()] as usize] = schedule.b();
    Ok(row)
}

/// One forward step applied to `config` in place.
#[inline]
pub fn noise_step_in_place<R: Rng + ?Sized>(
    config: &mut [u8],
    n: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) {
    let u = schedule.site_at(n).index();
    if rng.random::<f64>() >= schedule.epsilon {
        config[u] = rng.random_range(0..schedule.p) as u8;
    }
}

pub fn noise_step<R: Rng + ?Sized>(
    config: &[u8],
    n: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Configuration> {
    schedule.coordinate_at(n)?;
    schedule.space().validate(config)?;
    let mut out = Configuration::new(config.to_vec());
    noise_step_in_place(&mut out, n, schedule, rng);
    Ok(out)
}

/// States after `0, 1, ..., steps` forward steps starting at `config`.
pub fn noise_trajectory<R: Rng + ?Sized>(
    config: &[u8],
    steps: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<Configuration>> {
    if steps > schedule.steps {
        return Err(Error::InvalidParameter(format!(
            "{steps} steps requested, schedule has {}",
            schedule.steps
        )));
    }
    schedule.space().validate(config)?;
    let mut current = Configuration::new(config.to_vec());
    let mut out = Vec::with_capacity(steps + 1);
    out.push(current.clone());
    for n in 0..steps {
        noise_step_in_place(&mut current, n, schedule, rng);
        out.push(current.clone());
    }
    Ok(out)
}

/// Rows per independent RNG stream in batched noising.
pub(crate) const CHUNK_ROWS: usize = 1024;

/// Runs every row of `samples` forward `steps` steps and returns the
/// noised sets at times `0..=steps`. Rows are processed in fixed chunks,
/// each with its own stream derived from `seed`, so output does not depend
/// on the thread count.
pub fn noise_samples(
    samples: &SampleSet,
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<SampleSet>> {
    if steps > schedule.steps {
        return Err(Error::InvalidParameter(format!(
            "{steps} steps requested, schedule has {}",
            schedule.steps
        )));
    }
    if samples.space() != schedule.space() {
        return Err(Error::DimensionMismatch("samples do not match schedule".into()));
    }
    let q = samples.q();
    let flat = samples.as_flat();
    let chunks: Vec<Vec<Vec<u8>>> = flat
        .par_chunks(CHUNK_ROWS * q)
        .enumerate()
        .map(|(k, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut current = chunk.to_vec();
            let mut per_step = Vec::with_capacity(steps + 1);
            per_step.push(current.clone());
            for n in 0..steps {
                for row in current.chunks_exact_mut(q) {
                    noise_step_in_place(row, n, schedule, &mut rng);
                }
                per_step.push(current.clone());
            }
            per_step
        })
        .collect();
    (0..=steps)
        .map(|n| {
            let data: Vec<u8> = chunks.iter().flat_map(|c| c[n].iter().copied()).collect();
            SampleSet::from_flat(samples.space(), data, format!("{} | noised to step {n}", samples.provenance))
        })
        .collect()
}

/// Applies `row ↦ (b - a) row + a Σ row` across every fibre of `site`.
pub(crate) fn apply_site_kernel(probs: &[f64], space: &StateSpace, site: Site, a: f64, b: f64) -> Vec<f64> {
    let p = space.p();
    let stride = space.stride(site) as usize;
    let block = stride * p;
    let mut out = vec![0.0; probs.len()];
    for base in (0..probs.len()).step_by(block) {
        for offset in 0..stride {
            let start = base + offset;
            let total: f64 = (0..p).map(|r| probs[start + r * stride]).sum();
            for r in 0..p {
                out[start + r * stride] = (b - a) * probs[start + r * stride] + a * total;
            }
        }
    }
    out
}

/// `μ_{n+1} = Σ_σ̃ k_n(·, σ̃) μ_n(σ̃)` without materializing the kernel.
pub fn push_forward_exact(
    mu_n: &ExactDistribution,
    schedule: &NoiseSchedule,
    n: usize,
) -> Result<ExactDistribution> {
    let site = schedule.coordinate_at(n)?;
    let space = mu_n.space();
    if space != schedule.space() {
        return Err(Error::DimensionMismatch("distribution does not match schedule".into()));
    }
    let out = apply_site_kernel(mu_n.probs(), &space, site, schedule.a(), schedule.b());
    ExactDistribution::new(space, out)
}

/// Marginals `μ_0, ..., μ_T` of the forward chain.
pub fn forward_marginals(mu0: &ExactDistribution, schedule: &NoiseSchedule) -> Result<Vec<ExactDistribution>> {
    let mut out = Vec::with_capacity(schedule.steps + 1);
    out.push(mu0.clone());
    for n in 0..schedule.steps {
        let next = push_forward_exact(&out[n], schedule, n)?;
        out.push(next);
    }
    Ok(out)
}

/// `δ_T = ‖μ_T − uniform‖_TV` for the Gibbs law of `model`.
pub fn mixing_tv<M: EnergyModel + ?Sized>(model: &M, schedule: &NoiseSchedule, guard: Guard) -> Result<f64> {
    let mu0 = exact_distribution_guarded(model, guard)?;
    let marginals = forward_marginals(&mu0, schedule)?;
    let uniform = ExactDistribution::uniform(schedule.space(), guard)?;
    tv_exact(&marginals[schedule.steps], &uniform)
}
