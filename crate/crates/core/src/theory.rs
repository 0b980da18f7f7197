//! Brute-force checks of the reverse-chain error bound
//! `‖μ̂_0 − μ_0‖_TV ≤ δ_T + T·η + γ`, and the marginal-resampling kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{EmpiricalDistribution, ExactDistribution, Pmf};
use crate::error::{Error, Result};
use crate::forward::{forward_marginals, NoiseSchedule};
use crate::metrics::tv_exact;
use crate::models::{exact_distribution_guarded, sample_exact, EnergyModel};
use crate::reverse::{exact_reverse_kernel_row, reverse_pushforward_exact, reverse_pushforward_with_rows, ExactOracle};
use crate::seed::derive_seed;
use crate::state::{Guard, StateSpace};

/// Slack on `holds`, absorbing pushforward round-off.
pub const BOUND_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub delta_t: f64,
    pub eta: f64,
    pub steps: usize,
    pub gamma: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl BoundReport {
    fn new(lhs: f64, delta_t: f64, eta: f64, steps: usize, gamma: f64) -> Self {
        let rhs = delta_t + steps as f64 * eta + gamma;
        Self {
            lhs,
            delta_t,
            eta,
            steps,
            gamma,
            rhs,
            holds: lhs <= rhs + BOUND_TOLERANCE,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationMode {
    /// `row' = (1 − m)·row + m·uniform`.
    #[default]
    MixWithUniform,
    /// `row' = (1 − m)·row + m·d` with `d` uniform on the simplex, drawn
    /// independently for every `(n, σ̃)`.
    RandomSimplexJitter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub magnitude: f64,
    pub seed: u64,
    pub mode: PerturbationMode,
}

impl Perturbation {
    pub fn none() -> Self {
        Self {
            magnitude: 0.0,
            seed: 0,
            mode: PerturbationMode::MixWithUniform,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.magnitude) {
            return Err(Error::InvalidParameter(format!(
                "perturbation magnitude {} outside [0, 1]",
                self.magnitude
            )));
        }
        Ok(())
    }

    /// Perturbed copy of the row used at step `n` from state `index`.
    pub fn apply(&self, row: &[f64], n: usize, index: u64) -> Vec<f64> {
        let m = self.magnitude;
        if m == 0.0 {
            return row.to_vec();
        }
        let p = row.len();
        let target: Vec<f64> = match self.mode {
            PerturbationMode::MixWithUniform => vec![1.0 / p as f64; p],
            PerturbationMode::RandomSimplexJitter => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, n as u64, index));
                // normalized exponentials are uniform on the simplex
                let e: Vec<f64> = (0..p).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
                let total: f64 = e.iter().sum();
                e.into_iter().map(|x| x / total).collect()
            }
        };
        row.iter().zip(&target).map(|(r, t)| (1.0 - m) * r + m * t).collect()
    }
}

fn row_tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Exact forward marginals and reverse rows of one model, reused across
/// many perturbations.
pub struct BoundInstance {
    schedule: NoiseSchedule,
    marginals: Vec<ExactDistribution>,
    /// `rows[n][index * p + r]`.
    rows: Vec<Vec<f64>>,
    uniform: ExactDistribution,
    delta_t: f64,
}

impl BoundInstance {
    pub fn new<M: EnergyModel + ?Sized>(model: &M, schedule: &NoiseSchedule, guard: Guard) -> Result<Self> {
        Self::from_distribution(&exact_distribution_guarded(model, guard)?, schedule, guard)
    }

    pub fn from_distribution(mu0: &ExactDistribution, schedule: &NoiseSchedule, guard: Guard) -> Result<Self> {
        let space = schedule.space();
        if mu0.space() != space {
            return Err(Error::DimensionMismatch("distribution does not match schedule".into()));
        }
        let marginals = forward_marginals(mu0, schedule)?;
        let len = space.table_len(guard)?;
        let p = space.p();
        let mut config = vec![0u8; space.q()];
        let mut rows = Vec::with_capacity(schedule.steps);
        for n in 0..schedule.steps {
            let mut table = vec![0.0; len * p];
            for (idx, dst) in table.chunks_exact_mut(p).enumerate() {
                space.decode_into(idx as u64, &mut config);
                dst.copy_from_slice(&exact_reverse_kernel_row(&marginals[n], schedule, n, &config)?);
            }
            rows.push(table);
        }
        let uniform = ExactDistribution::uniform(space, guard)?;
        let delta_t = tv_exact(&marginals[schedule.steps], &uniform)?;
        Ok(Self {
            schedule: *schedule,
            marginals,
            rows,
            uniform,
            delta_t,
        })
    }

    pub fn marginals(&self) -> &[ExactDistribution] {
        &self.marginals
    }

    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    fn exact_row(&self, n: usize, index: u64) -> &[f64] {
        let p = self.schedule.p;
        &self.rows[n][index as usize * p..(index as usize + 1) * p]
    }

    /// Runs the perturbed reverse chain from `init` and reports the bound.
    pub fn check(&self, perturbation: &Perturbation, init: &ExactDistribution) -> Result<BoundReport> {
        perturbation.validate()?;
        let mut eta: f64 = 0.0;
        for n in 0..self.schedule.steps {
            for index in 0..self.uniform.len() as u64 {
                let exact = self.exact_row(n, index);
                eta = eta.max(row_tv(&perturbation.apply(exact, n, index), exact));
            }
        }
        let out = reverse_pushforward_with_rows(&self.schedule, init, |n, index, _| {
            Ok(perturbation.apply(self.exact_row(n, index), n, index))
        })?;
        let lhs = tv_exact(&out, &self.marginals[0])?;
        let gamma = tv_exact(init, &self.uniform)?;
        Ok(BoundReport::new(lhs, self.delta_t, eta, self.schedule.steps, gamma))
    }
}

/// Bound check with perturbed exact rows, started from the uniform law.
pub fn verify_error_bound<M: EnergyModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    perturbation: &Perturbation,
    guard: Guard,
) -> Result<BoundReport> {
    let instance = BoundInstance::new(model, schedule, guard)?;
    instance.check(perturbation, &instance.uniform)
}

/// Many perturbations of one model, in parallel.
pub fn verify_error_bounds<M: EnergyModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    perturbations: &[Perturbation],
    guard: Guard,
) -> Result<Vec<BoundReport>> {
    let instance = BoundInstance::new(model, schedule, guard)?;
    perturbations
        .par_iter()
        .map(|p| instance.check(p, &instance.uniform))
        .collect()
}

/// Exact reverse chain started from the empirical law of `noise_samples`
/// uniform draws; `γ` is that law's distance to uniform.
pub fn verify_init_error<M: EnergyModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    noise_samples: usize,
    seed: u64,
    guard: Guard,
) -> Result<BoundReport> {
    let space = schedule.space();
    let uniform = ExactDistribution::uniform(space, guard)?;
    let draws = sample_exact(&uniform, noise_samples, seed)?;
    let emp = crate::dist::empirical_from_samples(&draws)?;
    verify_init_distribution(model, schedule, &ExactDistribution::from_empirical(&emp, guard)?, guard)
}

/// Exact reverse chain started from an arbitrary `init`.
pub fn verify_init_distribution<M: EnergyModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    init: &ExactDistribution,
    guard: Guard,
) -> Result<BoundReport> {
    let mu0 = exact_distribution_guarded(model, guard)?;
    let oracle = ExactOracle::new(&mu0, schedule)?;
    let uniform = ExactDistribution::uniform(schedule.space(), guard)?;
    let out = reverse_pushforward_exact(&oracle, schedule, init)?;
    let lhs = tv_exact(&out, &mu0)?;
    let delta_t = tv_exact(&oracle.marginals()[schedule.steps], &uniform)?;
    let gamma = tv_exact(init, &uniform)?;
    Ok(BoundReport::new(lhs, delta_t, 0.0, schedule.steps, gamma))
}

/// `γ = TV(empirical, uniform)` for one set of uniform draws.
pub fn empirical_noise_gap(space: StateSpace, n: usize, seed: u64, guard: Guard) -> Result<f64> {
    let uniform = ExactDistribution::uniform(space, guard)?;
    let emp: EmpiricalDistribution = crate::dist::empirical_from_samples(&sample_exact(&uniform, n, seed)?)?;
    crate::metrics::tv(&emp, &uniform)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegenerateReport {
    /// Largest `|(K_t μ_{t+1})(σ) − μ_t(σ)|` for the resampling kernel.
    pub max_marginal_error: f64,
    /// Per step, the mass the resampling kernel moves by Hamming distance ≥ 2.
    pub nonlocal_mass: Vec<f64>,
    /// `(λ, max error)` for `λ·canonical + (1 − λ)·resampling`.
    pub mixtures: Vec<(f64, f64)>,
    /// Same non-local mass for the canonical kernel (always 0).
    pub canonical_nonlocal_mass: f64,
}

/// Compares the canonical single-site reverse kernel with the kernel that
/// ignores its input and redraws from `μ_t`.
pub fn degenerate_reverse_demo<M: EnergyModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    lambdas: &[f64],
    guard: Guard,
) -> Result<DegenerateReport> {
    let space = schedule.space();
    let mu0 = exact_distribution_guarded(model, guard)?;
    let marginals = forward_marginals(&mu0, schedule)?;
    let len = space.table_len(guard)?;
    let mut config = vec![0u8; space.q()];
    let mut max_marginal_error: f64 = 0.0;
    let mut nonlocal_mass = Vec::with_capacity(schedule.steps);
    let mut mix_errors = vec![0.0f64; lambdas.len()];
    let mut canonical_nonlocal: f64 = 0.0;
    for n in 0..schedule.steps {
        let target = marginals[n].probs();
        let source = marginals[n + 1].probs();
        let site = schedule.site_at(n);
        let stride = space.stride(site) as usize;
        // resampling kernel: out(σ) = Σ_σ̃ μ_n(σ) μ_{n+1}(σ̃), entry by entry
        let mut degenerate = vec![0.0; len];
        let mut far = 0.0;
        for (j, &mass) in source.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (i, d) in degenerate.iter_mut().enumerate() {
                *d += target[i] * mass;
                if space.hamming(i as u64, j as u64) > 1 {
                    far += target[i] * mass;
                }
            }
        }
        nonlocal_mass.push(far);
        for (d, t) in degenerate.iter().zip(target) {
            max_marginal_error = max_marginal_error.max((d - t).abs());
        }
        // canonical kernel on the same footing
        let mut canonical = vec![0.0; len];
        for (j, &mass) in source.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            space.decode_into(j as u64, &mut config);
            let row = exact_reverse_kernel_row(&marginals[n], schedule, n, &config)?;
            let base = j - config[site.index()] as usize * stride;
            for (r, k) in row.iter().enumerate() {
                let i = base + r * stride;
                canonical[i] += k * mass;
                if space.hamming(i as u64, j as u64) > 1 {
                    canonical_nonlocal = canonical_nonlocal.max(k * mass);
                }
            }
        }
        for (err, &lambda) in mix_errors.iter_mut().zip(lambdas) {
            for ((c, d), t) in canonical.iter().zip(&degenerate).zip(target) {
                *err = err.max((lambda * c + (1.0 - lambda) * d - t).abs());
            }
        }
    }
    Ok(DegenerateReport {
        max_marginal_error,
        nonlocal_mass,
        mixtures: lambdas.iter().copied().zip(mix_errors).collect(),
        canonical_nonlocal_mass: canonical_nonlocal,
    })
}
