//! Reverse-time kernels and samplers.
//!
//! The reverse kernel at step `n` undoes `k_n`: from `σ̃` it moves only the
//! site `u` that `k_n` touched, with weights
//! `b · c(σ̃_u)` for staying and `a · c(r)` for moving to `r`, where `c` is the
//! single-site conditional of `μ_n` given the rest of `σ̃`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{ExactDistribution, Pmf, SampleSet};
use crate::error::{Error, Result};
use crate::forward::{forward_marginals, NoiseSchedule, CHUNK_ROWS};
use crate::models::{draw_symbol, exact_distribution_guarded, EnergyModel};
use crate::state::{Configuration, Guard, Site, StateSpace};

/// Tolerance on the row sums of oracle outputs.
pub const CONDITIONAL_TOLERANCE: f64 = 1e-9;

/// Floor on the normalizer of a ratio-built reverse row.
pub const ROW_FLOOR: f64 = 1e-30;

/// Single-site conditionals `μ_n(· | σ_{−u})` for each reverse step.
pub trait ConditionalOracle: Sync {
    fn space(&self) -> StateSpace;

    /// Number of forward steps `T` the oracle was built for.
    fn steps(&self) -> usize;

    /// Distribution over the symbol at `site`. The symbol currently stored at
    /// `site` in `config` is ignored.
    fn conditional(&self, n: usize, site: Site, config: &[u8]) -> Result<Vec<f64>>;

    /// Conditionals for many rows at once. `rows` is row-major with `q`
    /// columns; `out` receives `p` values per row.
    fn conditional_batch(&self, n: usize, site: Site, rows: &[u8], out: &mut [f64]) -> Result<()> {
        let q = self.space().q();
        let p = self.space().p();
        for (row, dst) in rows.chunks_exact(q).zip(out.chunks_exact_mut(p)) {
            dst.copy_from_slice(&self.conditional(n, site, row)?);
        }
        Ok(())
    }
}

/// Conditionals of the exact forward marginals `μ_0, ..., μ_T`.
#[derive(Clone, Debug)]
pub struct ExactOracle {
    schedule: NoiseSchedule,
    marginals: Vec<ExactDistribution>,
}

impl ExactOracle {
    pub fn new(mu0: &ExactDistribution, schedule: &NoiseSchedule) -> Result<Self> {
        if mu0.space() != schedule.space() {
            return Err(Error::DimensionMismatch("distribution does not match schedule".into()));
        }
        Ok(Self {
            schedule: *schedule,
            marginals: forward_marginals(mu0, schedule)?,
        })
    }

    pub fn from_model<M: EnergyModel + ?Sized>(model: &M, schedule: &NoiseSchedule, guard: Guard) -> Result<Self> {
        Self::new(&exact_distribution_guarded(model, guard)?, schedule)
    }

    pub fn marginals(&self) -> &[ExactDistribution] {
        &self.marginals
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

impl ConditionalOracle for ExactOracle {
    fn space(&self) -> StateSpace {
        self.schedule.space()
    }

    fn steps(&self) -> usize {
        self.schedule.steps
    }

    fn conditional(&self, n: usize, site: Site, config: &[u8]) -> Result<Vec<f64>> {
        let mu = self.marginals.get(n).ok_or_else(|| {
            Error::InvalidParameter(format!("step {n} outside 0..={}", self.schedule.steps))
        })?;
        fibre_conditional(mu, n, site, config)
    }
}

/// `μ(· | σ_{−u})` read off a full table.
fn fibre_conditional(mu: &ExactDistribution, n: usize, site: Site, config: &[u8]) -> Result<Vec<f64>> {
    let space = mu.space();
    space.validate(config)?;
    let stride = space.stride(site);
    let base = space.encode_unchecked(config) - config[site.index()] as u64 * stride;
    let mut c: Vec<f64> = (0..space.p() as u64)
        .map(|r| mu.probs()[(base + r * stride) as usize])
        .collect();
    let total: f64 = c.iter().sum();
    if !(total > 0.0) {
        return Err(Error::SupportHole { step: n });
    }
    c.iter_mut().for_each(|x| *x /= total);
    Ok(c)
}

/// Uniform conditionals; the reverse kernel then equals the forward one.
#[derive(Clone, Copy, Debug)]
pub struct UniformOracle {
    pub space: StateSpace,
    pub steps: usize,
}

impl ConditionalOracle for UniformOracle {
    fn space(&self) -> StateSpace {
        self.space
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn conditional(&self, _n: usize, _site: Site, _config: &[u8]) -> Result<Vec<f64>> {
        let p = self.space.p();
        Ok(vec![1.0 / p as f64; p])
    }
}

/// Checks that `c` is a distribution to [`CONDITIONAL_TOLERANCE`].
pub fn check_conditional(c: &[f64]) -> Result<()> {
    if c.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidDistribution(format!("conditional {c:?} has invalid entries")));
    }
    let total: f64 = c.iter().sum();
    if (total - 1.0).abs() > CONDITIONAL_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("conditional sums to {total}")));
    }
    Ok(())
}

/// Reverse row from a conditional `c` when the current symbol is `stay`.
pub(crate) fn ratio_row(c: &[f64], stay: usize, a: f64, b: f64, out: &mut [f64]) {
    let mut total = 0.0;
    for (r, (o, &cr)) in out.iter_mut().zip(c).enumerate() {
        *o = if r == stay { b * cr } else { a * cr };
        total += *o;
    }
    if total < ROW_FLOOR {
        // all weight underflowed: keep the forward row shape
        for (r, o) in out.iter_mut().enumerate() {
            *o = if r == stay { b } else { a };
        }
        total = b + a * (out.len() - 1) as f64;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn check_step(schedule: &NoiseSchedule, n: usize, from: &[u8]) -> Result<Site> {
    let site = schedule.coordinate_at(n)?;
    schedule.space().validate(from)?;
    Ok(site)
}

/// Bayes reversal of `k_n` against the table `μ_n`: entry `r` is the
/// probability of moving from `from` to `from` with site `u` set to `r`.
pub fn exact_reverse_kernel_row(
    mu_n: &ExactDistribution,
    schedule: &NoiseSchedule,
    n: usize,
    from: &[u8],
) -> Result<Vec<f64>> {
    let site = check_step(schedule, n, from)?;
    if mu_n.space() != schedule.space() {
        return Err(Error::DimensionMismatch("distribution does not match schedule".into()));
    }
    let space = mu_n.space();
    let stride = space.stride(site);
    let stay = from[site.index()] as usize;
    let base = space.encode_unchecked(from) - stay as u64 * stride;
    let mut row: Vec<f64> = (0..space.p())
        .map(|r| {
            let k = if r == stay { schedule.b() } else { schedule.a() };
            k * mu_n.probs()[(base + r as u64 * stride) as usize]
        })
        .collect();
    // the normalizer is μ_{n+1}(from)
    let total: f64 = row.iter().sum();
    if !(total > f64::MIN_POSITIVE) {
        return Err(Error::SupportHole { step: n });
    }
    row.iter_mut().for_each(|x| *x /= total);
    Ok(row)
}

/// Reverse row built from the oracle's conditional at step `n`.
pub fn reverse_kernel_row_from_conditionals<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    schedule: &NoiseSchedule,
    n: usize,
    from: &[u8],
) -> Result<Vec<f64>> {
    let site = check_step(schedule, n, from)?;
    let c = oracle.conditional(n, site, from)?;
    if c.len() != schedule.p {
        return Err(Error::DimensionMismatch(format!(
            "oracle returned {} values for alphabet {}",
            c.len(),
            schedule.p
        )));
    }
    check_conditional(&c)?;
    let mut row = vec![0.0; schedule.p];
    ratio_row(&c, from[site.index()] as usize, schedule.a(), schedule.b(), &mut row);
    Ok(row)
}

fn check_oracle<O: ConditionalOracle + ?Sized>(oracle: &O, schedule: &NoiseSchedule) -> Result<()> {
    if oracle.space() != schedule.space() {
        return Err(Error::DimensionMismatch("oracle does not match schedule".into()));
    }
    if oracle.steps() != schedule.steps {
        return Err(Error::DimensionMismatch(format!(
            "oracle built for {} steps, schedule has {}",
            oracle.steps(),
            schedule.steps
        )));
    }
    Ok(())
}

/// Starting law of the reverse chain.
#[derive(Clone, Copy, Debug)]
pub enum ReverseInit<'a> {
    Uniform,
    /// Rows drawn with replacement from the set.
    Samples(&'a SampleSet),
    Exact(&'a ExactDistribution),
}

/// Draws `Y_T` from `init` and applies the reverse kernels for
/// `n = T−1, ..., 0`. Chains run in fixed chunks with their own RNG
/// streams, so the output depends only on `seed`.
pub fn reverse_sample<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    schedule: &NoiseSchedule,
    n_samples: usize,
    init: ReverseInit<'_>,
    seed: u64,
) -> Result<SampleSet> {
    check_oracle(oracle, schedule)?;
    let space = schedule.space();
    let (q, p) = (space.q(), space.p());
    match init {
        ReverseInit::Samples(s) if s.space() != space => {
            return Err(Error::DimensionMismatch("initial samples do not match schedule".into()))
        }
        ReverseInit::Samples(s) if s.is_empty() => return Err(Error::Empty("initial samples")),
        ReverseInit::Exact(d) if d.space() != space => {
            return Err(Error::DimensionMismatch("initial law does not match schedule".into()))
        }
        _ => {}
    }
    let sampler = match init {
        ReverseInit::Exact(d) => Some(d.sampler()),
        _ => None,
    };
    let n_chunks = n_samples.div_ceil(CHUNK_ROWS);
    let chunks: Vec<Vec<u8>> = (0..n_chunks)
        .into_par_iter()
        .map(|k| -> Result<Vec<u8>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let rows = CHUNK_ROWS.min(n_samples - k * CHUNK_ROWS);
            let mut data = vec![0u8; rows * q];
            for row in data.chunks_exact_mut(q) {
                match init {
                    ReverseInit::Uniform => row.iter_mut().for_each(|s| *s = rng.random_range(0..p) as u8),
                    ReverseInit::Samples(s) => row.copy_from_slice(s.row(rng.random_range(0..s.len()))),
                    ReverseInit::Exact(_) => {
                        let idx = sampler.as_ref().expect("built for exact init").sample(&mut rng);
                        space.decode_into(idx, row);
                    }
                }
            }
            let mut cond = vec![0.0; rows * p];
            let mut kernel = vec![0.0; p];
            for n in (0..schedule.steps).rev() {
                let site = schedule.site_at(n);
                oracle.conditional_batch(n, site, &data, &mut cond)?;
                for (row, c) in data.chunks_exact_mut(q).zip(cond.chunks_exact(p)) {
                    check_conditional(c)?;
                    ratio_row(c, row[site.index()] as usize, schedule.a(), schedule.b(), &mut kernel);
                    row[site.index()] = draw_symbol(&kernel, &mut rng);
                }
            }
            Ok(data)
        })
        .collect::<Result<_>>()?;
    SampleSet::from_flat(space, chunks.concat(), format!("reverse sampler seed={seed}"))
}

/// Diagnostics from an exact reverse pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReverseReport {
    pub steps: usize,
    pub rows: usize,
    /// Largest `|Σ row − 1|` over every kernel row applied.
    pub max_row_sum_error: f64,
    /// Largest `|log c(r) − log c(s)|` over symbols with positive mass.
    pub max_abs_log_ratio: f64,
}

/// Table indices with symbol 0 at `site`, one per fibre, and their decoded rows.
fn fibre_bases(space: &StateSpace, site: Site, len: usize) -> (Vec<usize>, Vec<u8>) {
    let stride = space.stride(site) as usize;
    let block = stride * space.p();
    let mut bases = Vec::with_capacity(len / space.p());
    for start in (0..len).step_by(block) {
        bases.extend(start..start + stride);
    }
    let q = space.q();
    let mut rows = vec![0u8; bases.len() * q];
    for (b, row) in bases.iter().zip(rows.chunks_exact_mut(q)) {
        space.decode_into(*b as u64, row);
    }
    (bases, rows)
}

/// One reverse step on a full table given per-fibre conditionals.
fn reverse_step_table(
    old: &[f64],
    stride: usize,
    bases: &[usize],
    cond: &[f64],
    p: usize,
    a: f64,
    b: f64,
    report: &mut ReverseReport,
) -> Vec<f64> {
    let mut new = vec![0.0; old.len()];
    let mut kernel = vec![0.0; p];
    for (&base, c) in bases.iter().zip(cond.chunks_exact(p)) {
        for s in 0..p {
            let mass = old[base + s * stride];
            ratio_row(c, s, a, b, &mut kernel);
            report.max_row_sum_error = report.max_row_sum_error.max((kernel.iter().sum::<f64>() - 1.0).abs());
            report.rows += 1;
            if mass == 0.0 {
                continue;
            }
            for (r, k) in kernel.iter().enumerate() {
                new[base + r * stride] += k * mass;
            }
        }
        let positive: Vec<f64> = c.iter().copied().filter(|x| *x > 0.0).collect();
        if let (Some(lo), Some(hi)) = (
            positive.iter().copied().reduce(f64::min),
            positive.iter().copied().reduce(f64::max),
        ) {
            report.max_abs_log_ratio = report.max_abs_log_ratio.max((hi / lo).ln());
        }
    }
    new
}

/// Exact output law of the reverse chain started from `init`.
pub fn reverse_pushforward_exact<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    schedule: &NoiseSchedule,
    init: &ExactDistribution,
) -> Result<ExactDistribution> {
    Ok(reverse_pushforward_report(oracle, schedule, init)?.0)
}

pub fn reverse_pushforward_report<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    schedule: &NoiseSchedule,
    init: &ExactDistribution,
) -> Result<(ExactDistribution, ReverseReport)> {
    check_oracle(oracle, schedule)?;
    if init.space() != schedule.space() {
        return Err(Error::DimensionMismatch("initial law does not match schedule".into()));
    }
    let space = schedule.space();
    let p = space.p();
    let mut report = ReverseReport {
        steps: schedule.steps,
        rows: 0,
        max_row_sum_error: 0.0,
        max_abs_log_ratio: 0.0,
    };
    let mut table = init.probs().to_vec();
    for n in (0..schedule.steps).rev() {
        let site = schedule.site_at(n);
        let (bases, rows) = fibre_bases(&space, site, table.len());
        let mut cond = vec![0.0; bases.len() * p];
        oracle.conditional_batch(n, site, &rows, &mut cond)?;
        for c in cond.chunks_exact(p) {
            check_conditional(c)?;
        }
        table = reverse_step_table(
            &table,
            space.stride(site) as usize,
            &bases,
            &cond,
            p,
            schedule.a(),
            schedule.b(),
            &mut report,
        );
    }
    Ok((ExactDistribution::new(space, table)?, report))
}

/// Exact reverse pass with caller-supplied rows: `row(n, from)` returns the
/// kernel row over the symbols of site `u(n)` for the state `from`.
pub fn reverse_pushforward_with_rows<F>(
    schedule: &NoiseSchedule,
    init: &ExactDistribution,
    mut row: F,
) -> Result<ExactDistribution>
where
    F: FnMut(usize, u64, &[u8]) -> Result<Vec<f64>>,
{
    if init.space() != schedule.space() {
        return Err(Error::DimensionMismatch("initial law does not match schedule".into()));
    }
    let space = schedule.space();
    let q = space.q();
    let mut table = init.probs().to_vec();
    let mut from = vec![0u8; q];
    for n in (0..schedule.steps).rev() {
        let site = schedule.site_at(n);
        let stride = space.stride(site) as usize;
        let mut new = vec![0.0; table.len()];
        for (idx, &mass) in table.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            space.decode_into(idx as u64, &mut from);
            let kernel = row(n, idx as u64, &from)?;
            let base = idx - from[site.index()] as usize * stride;
            for (r, k) in kernel.iter().enumerate() {
                new[base + r * stride] += k * mass;
            }
        }
        table = new;
    }
    ExactDistribution::new(space, table)
}

/// `ε = 0` sampler: starts uniform and resamples the coordinates in `order`
/// once each, the `k`-th from the oracle's conditional at step `n = q−1−k`.
pub fn autoregressive_sample<O: ConditionalOracle + ?Sized, R: Rng + ?Sized>(
    oracle: &O,
    order: &[Site],
    rng: &mut R,
) -> Result<Configuration> {
    let space = oracle.space();
    check_order(&space, order)?;
    let q = space.q();
    let mut config: Vec<u8> = (0..q).map(|_| rng.random_range(0..space.p()) as u8).collect();
    for (k, &site) in order.iter().enumerate() {
        let c = oracle.conditional(q - 1 - k, site, &config)?;
        check_conditional(&c)?;
        config[site.index()] = draw_symbol(&c, rng);
    }
    Ok(Configuration::new(config))
}

/// Coordinates in the order the `T = q` reverse chain visits them.
pub fn reverse_round_robin_order(q: usize) -> Vec<Site> {
    (0..q).rev().map(Site::from_index).collect()
}

fn check_order(space: &StateSpace, order: &[Site]) -> Result<()> {
    let mut seen = vec![false; space.q()];
    for s in order {
        match seen.get_mut(s.index()) {
            Some(v) if !*v => *v = true,
            _ => return Err(Error::InvalidParameter(format!("order is not a permutation at site {s}"))),
        }
    }
    if seen.iter().any(|v| !v) || order.len() != space.q() {
        return Err(Error::InvalidParameter("order must visit every site once".into()));
    }
    Ok(())
}

/// Law of [`autoregressive_sample`] by summing the unrolled product of
/// conditionals over every initial state and every output state.
pub fn autoregressive_law_exact<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    order: &[Site],
    guard: Guard,
) -> Result<ExactDistribution> {
    let space = oracle.space();
    check_order(&space, order)?;
    let len = space.table_len(guard)?;
    let q = space.q();
    let mut law = vec![0.0; len];
    let mut x = vec![0u8; q];
    let mut y = vec![0u8; q];
    let mut ctx = vec![0u8; q];
    for xi in 0..len {
        space.decode_into(xi as u64, &mut x);
        for (yi, slot) in law.iter_mut().enumerate() {
            space.decode_into(yi as u64, &mut y);
            ctx.copy_from_slice(&x);
            let mut prob = 1.0 / len as f64;
            for (k, &site) in order.iter().enumerate() {
                let c = oracle.conditional(q - 1 - k, site, &ctx)?;
                let u = site.index();
                prob *= c[y[u] as usize];
                ctx[u] = y[u];
            }
            *slot += prob;
        }
    }
    ExactDistribution::new(space, law)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::empirical_from_samples;
    use crate::forward::push_forward_exact;
    use crate::metrics::{tv, tv_exact};
    use crate::models::{exact_distribution, IsingModel};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_ising(q: usize, seed: u64) -> IsingModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IsingModel::random_dense(q, 1.0, 0.5, &mut rng)
    }

    fn random_law(q: usize, p: usize, seed: u64) -> ExactDistribution {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..p.pow(q as u32)).map(|_| rng.random::<f64>() + 0.05).collect();
        ExactDistribution::from_weights(StateSpace::new(q, p).unwrap(), w).unwrap()
    }

    fn all_states(space: &StateSpace) -> Vec<Vec<u8>> {
        (0..space.num_states().unwrap()).map(|i| space.decode(i).unwrap().into_inner()).collect()
    }

    #[test]
    fn uniform_marginal_gives_forward_row() {
        let sch = NoiseSchedule::new(3, 3, 6, 0.4).unwrap();
        let u = ExactDistribution::uniform(sch.space(), Guard::default()).unwrap();
        let row = exact_reverse_kernel_row(&u, &sch, 1, &[2, 1, 0]).unwrap();
        for (r, v) in row.iter().enumerate() {
            let expect = if r == 1 { sch.b() } else { sch.a() };
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn epsilon_one_is_identity() {
        let sch = NoiseSchedule::new(3, 2, 6, 1.0).unwrap();
        let mu = random_law(3, 2, 1);
        for from in all_states(&sch.space()) {
            for n in 0..6 {
                let row = exact_reverse_kernel_row(&mu, &sch, n, &from).unwrap();
                let u = sch.site_at(n).index();
                for (r, v) in row.iter().enumerate() {
                    assert_eq!(*v, if r == from[u] as usize { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn support_hole_is_reported() {
        let sch = NoiseSchedule::new(2, 2, 2, 0.3).unwrap();
        let mu = ExactDistribution::point_mass(sch.space(), 0, Guard::default()).unwrap();
        // fibre of site 1 through state 3 = {2, 3}, both empty
        assert!(matches!(
            exact_reverse_kernel_row(&mu, &sch, 0, &[1, 1]),
            Err(Error::SupportHole { step: 0 })
        ));
    }

    /// Σ_σ̃ k_rev(σ|σ̃) μ_{n+1}(σ̃) = μ_n(σ), computed state by state.
    #[test]
    fn reversal_identity_by_brute_force() {
        for (seed, eps) in [(1, 0.0), (2, 0.3), (3, 0.7)] {
            let model = random_ising(3, seed);
            let sch = NoiseSchedule::with_sweeps(3, 2, 2, eps).unwrap();
            let marg = forward_marginals(&exact_distribution(&model).unwrap(), &sch).unwrap();
            let space = sch.space();
            for n in 0..sch.steps {
                let mut rebuilt = [0.0; 8];
                let u = sch.site_at(n);
                for from in all_states(&space) {
                    let row = exact_reverse_kernel_row(&marg[n], &sch, n, &from).unwrap();
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    let mass = marg[n + 1].probs()[space.encode(&from).unwrap() as usize];
                    for (r, v) in row.iter().enumerate() {
                        let mut to = from.clone();
                        to[u.index()] = r as u8;
                        rebuilt[space.encode(&to).unwrap() as usize] += v * mass;
                    }
                }
                for (x, y) in rebuilt.iter().zip(marg[n].probs()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ratio_rows_match_table_rows() {
        for (seed, eps) in [(4, 0.0), (5, 0.5), (6, 0.9)] {
            let model = random_ising(3, seed);
            let sch = NoiseSchedule::with_sweeps(3, 2, 2, eps).unwrap();
            let oracle = ExactOracle::from_model(&model, &sch, Guard::default()).unwrap();
            for from in all_states(&sch.space()) {
                for n in 0..sch.steps {
                    let x = exact_reverse_kernel_row(&oracle.marginals()[n], &sch, n, &from).unwrap();
                    let y = reverse_kernel_row_from_conditionals(&oracle, &sch, n, &from).unwrap();
                    for (a, b) in x.iter().zip(&y) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn binary_rows_follow_closed_form() {
        // flip weight (1−ε)/2 · μ(−s), stay weight (1+ε)/2 · μ(s)
        let eps = 0.35;
        let sch = NoiseSchedule::new(1, 2, 1, eps).unwrap();
        let mu = ExactDistribution::new(sch.space(), vec![0.2, 0.8]).unwrap();
        let oracle = ExactOracle::new(&mu, &sch).unwrap();
        let row = reverse_kernel_row_from_conditionals(&oracle, &sch, 0, &[0]).unwrap();
        let stay = (1.0 + eps) * 0.2;
        let flip = (1.0 - eps) * 0.8;
        assert!((row[0] - stay / (stay + flip)).abs() < 1e-15);
        assert!((row[1] - flip / (stay + flip)).abs() < 1e-15);
    }

    #[test]
    fn uniform_oracle_row_is_forward_row() {
        let sch = NoiseSchedule::new(2, 4, 4, 0.2).unwrap();
        let o = UniformOracle { space: sch.space(), steps: 4 };
        let row = reverse_kernel_row_from_conditionals(&o, &sch, 3, &[1, 3]).unwrap();
        assert!((row[3] - sch.b()).abs() < 1e-15);
        assert!((row[0] - sch.a()).abs() < 1e-15);
    }

    struct Broken;
    impl ConditionalOracle for Broken {
        fn space(&self) -> StateSpace {
            StateSpace::new(2, 2).unwrap()
        }
        fn steps(&self) -> usize {
            2
        }
        fn conditional(&self, _: usize, _: Site, _: &[u8]) -> Result<Vec<f64>> {
            Ok(vec![0.7, 0.7])
        }
    }

    #[test]
    fn invalid_oracle_output_is_rejected() {
        let sch = NoiseSchedule::new(2, 2, 2, 0.0).unwrap();
        assert!(reverse_kernel_row_from_conditionals(&Broken, &sch, 0, &[0, 0]).is_err());
        assert!(reverse_sample(&Broken, &sch, 10, ReverseInit::Uniform, 0).is_err());
    }

    #[test]
    fn underflowed_conditional_still_gives_a_row() {
        let mut row = [0.0; 3];
        ratio_row(&[0.0, 1.0, 0.0], 0, 0.3, 0.4, &mut row);
        assert_eq!(row, [0.0, 1.0, 0.0]);
        // ε = 1 and an empty current symbol: no weight anywhere
        ratio_row(&[0.0, 1.0, 0.0], 0, 0.0, 1.0, &mut row);
        assert_eq!(row, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn exact_reverse_pushforward_recovers_mu0() {
        for (seed, eps) in [(7, 0.0), (8, 0.3), (9, 0.7)] {
            let model = random_ising(3, seed);
            let sch = NoiseSchedule::with_sweeps(3, 2, 2, eps).unwrap();
            let oracle = ExactOracle::from_model(&model, &sch, Guard::default()).unwrap();
            let (out, report) =
                reverse_pushforward_report(&oracle, &sch, &oracle.marginals()[sch.steps]).unwrap();
            assert!(tv_exact(&out, &oracle.marginals()[0]).unwrap() < 1e-12);
            assert!(report.max_row_sum_error < 1e-12);
            assert_eq!(report.rows, sch.steps * 8);
        }
        // p = 3 as well
        let mu0 = random_law(2, 3, 10);
        let sch = NoiseSchedule::with_sweeps(2, 3, 2, 0.4).unwrap();
        let oracle = ExactOracle::new(&mu0, &sch).unwrap();
        let out = reverse_pushforward_exact(&oracle, &sch, &oracle.marginals()[sch.steps]).unwrap();
        assert!(tv_exact(&out, &mu0).unwrap() < 1e-12);
    }

    #[test]
    fn identity_kernels_keep_init() {
        let sch = NoiseSchedule::new(3, 2, 6, 1.0).unwrap();
        let init = random_law(3, 2, 11);
        let oracle = ExactOracle::new(&random_law(3, 2, 12), &sch).unwrap();
        let out = reverse_pushforward_exact(&oracle, &sch, &init).unwrap();
        assert!(tv_exact(&out, &init).unwrap() < 1e-15);
    }

    #[test]
    fn with_rows_matches_oracle_pass() {
        let mu0 = random_law(3, 2, 13);
        let sch = NoiseSchedule::with_sweeps(3, 2, 2, 0.25).unwrap();
        let oracle = ExactOracle::new(&mu0, &sch).unwrap();
        let init = random_law(3, 2, 14);
        let a = reverse_pushforward_exact(&oracle, &sch, &init).unwrap();
        let b = reverse_pushforward_with_rows(&sch, &init, |n, _, from| {
            exact_reverse_kernel_row(&oracle.marginals()[n], &sch, n, from)
        })
        .unwrap();
        assert!(tv_exact(&a, &b).unwrap() < 1e-14);
    }

    #[test]
    fn forward_then_reverse_round_trip_is_stationary() {
        // one reverse step undoes one forward step on the exact tables
        let mu = random_law(2, 3, 15);
        let sch = NoiseSchedule::new(2, 3, 1, 0.2).unwrap();
        let next = push_forward_exact(&mu, &sch, 0).unwrap();
        let oracle = ExactOracle::new(&mu, &sch).unwrap();
        let back = reverse_pushforward_exact(&oracle, &sch, &next).unwrap();
        assert!(tv_exact(&back, &mu).unwrap() < 1e-14);
    }

    #[test]
    fn sampling_is_seeded_and_matches_exact_law() {
        let model = random_ising(3, 16);
        let sch = NoiseSchedule::with_sweeps(3, 2, 2, 0.3).unwrap();
        let oracle = ExactOracle::from_model(&model, &sch, Guard::default()).unwrap();
        let a = reverse_sample(&oracle, &sch, 3000, ReverseInit::Uniform, 5).unwrap();
        let b = reverse_sample(&oracle, &sch, 3000, ReverseInit::Uniform, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, reverse_sample(&oracle, &sch, 3000, ReverseInit::Uniform, 6).unwrap());

        let uniform = ExactDistribution::uniform(sch.space(), Guard::default()).unwrap();
        let law = reverse_pushforward_exact(&oracle, &sch, &uniform).unwrap();
        let n = 200_000;
        let s = reverse_sample(&oracle, &sch, n, ReverseInit::Uniform, 7).unwrap();
        let emp = empirical_from_samples(&s).unwrap();
        // expected TV of an 8-cell empirical law is about √(8/(2πn))
        assert!(tv(&emp, &law).unwrap() < 0.01);
    }

    #[test]
    fn sampling_with_identity_kernels_returns_init() {
        let sch = NoiseSchedule::new(3, 2, 6, 1.0).unwrap();
        let o = UniformOracle { space: sch.space(), steps: 6 };
        let init = SampleSet::from_rows(sch.space(), [[1u8, 0, 1]; 7], "").unwrap();
        let out = reverse_sample(&o, &sch, 50, ReverseInit::Samples(&init), 0).unwrap();
        assert!(out.rows().all(|r| r == [1, 0, 1]));
        let pm = ExactDistribution::point_mass(sch.space(), 6, Guard::default()).unwrap();
        let out = reverse_sample(&o, &sch, 50, ReverseInit::Exact(&pm), 0).unwrap();
        assert!(out.rows().all(|r| r == [0, 1, 1]));
    }

    #[test]
    fn autoregressive_law_equals_collapsed_chain() {
        for (q, p, seed) in [(3, 2, 17), (2, 3, 18)] {
            let mu0 = random_law(q, p, seed);
            let sch = NoiseSchedule::new(q, p, q, 0.0).unwrap();
            let oracle = ExactOracle::new(&mu0, &sch).unwrap();
            let uniform = ExactDistribution::uniform(sch.space(), Guard::default()).unwrap();
            let chain = reverse_pushforward_exact(&oracle, &sch, &uniform).unwrap();
            let ar = autoregressive_law_exact(&oracle, &reverse_round_robin_order(q), Guard::default()).unwrap();
            assert!(tv_exact(&chain, &ar).unwrap() < 1e-12);
            // full mixing at ε = 0, T = q, so both equal μ_0
            assert!(tv_exact(&chain, &mu0).unwrap() < 1e-12);
        }
    }

    #[test]
    fn autoregressive_independent_sites_keep_marginals() {
        let model = IsingModel::new(3, vec![], vec![0.4, -0.9, 0.1]).unwrap();
        let sch = NoiseSchedule::new(3, 2, 3, 0.0).unwrap();
        let oracle = ExactOracle::from_model(&model, &sch, Guard::default()).unwrap();
        let ar = autoregressive_law_exact(&oracle, &reverse_round_robin_order(3), Guard::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let mut ones = [0usize; 3];
        for _ in 0..n {
            let c = autoregressive_sample(&oracle, &reverse_round_robin_order(3), &mut rng).unwrap();
            for i in 0..3 {
                ones[i] += c[i] as usize;
            }
        }
        for (i, h) in [0.4f64, -0.9, 0.1].iter().enumerate() {
            let p1 = h.exp() / (h.exp() + (-h).exp());
            let exact: f64 = ar
                .probs()
                .iter()
                .enumerate()
                .filter(|(k, _)| (k >> i) & 1 == 1)
                .map(|(_, v)| v)
                .sum();
            assert!((exact - p1).abs() < 1e-12);
            let sd = (p1 * (1.0 - p1) / n as f64).sqrt();
            assert!((ones[i] as f64 / n as f64 - p1).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn autoregressive_uniform_oracle_is_uniform() {
        let o = UniformOracle { space: StateSpace::new(3, 3).unwrap(), steps: 3 };
        let law = autoregressive_law_exact(&o, &reverse_round_robin_order(3), Guard::default()).unwrap();
        assert!(law.probs().iter().all(|v| (v - 1.0 / 27.0).abs() < 1e-15));
        assert!(autoregressive_law_exact(&o, &[Site::from_index(0); 3], Guard::default()).is_err());
    }

    proptest! {
        #[test]
        fn ratio_rows_are_stochastic(
            c in prop::collection::vec(0.0f64..1.0, 2..6),
            eps in 0.0f64..=1.0,
            stay_seed in 0usize..100,
        ) {
            let total: f64 = c.iter().sum();
            prop_assume!(total > 1e-6);
            let c: Vec<f64> = c.iter().map(|x| x / total).collect();
            let p = c.len();
            let a = (1.0 - eps) / p as f64;
            let b = a + eps;
            let mut row = vec![0.0; p];
            ratio_row(&c, stay_seed % p, a, b, &mut row);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
