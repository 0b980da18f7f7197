//! Distances between distributions and sample sets.
//!
//! - [`tv`]: half-L1 distance between two probability laws on the same space.
//! - [`cross_correlation`] / [`cross_correlation_error`]: pairwise spin
//!   correlations (binary) or symbol-agreement rates (`p > 2`), compared by
//!   the mean absolute difference over the strict upper triangle.
//! - [`mmd`]: unbiased squared MMD with a Gaussian kernel.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dist::{ExactDistribution, Pmf, SampleSet};
use crate::error::{Error, Result};

/// One computed metric with the settings that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_a: usize,
    pub n_b: usize,
    #[serde(default)]
    pub params: Vec<(String, String)>,
}

fn check_same_space<A: Pmf + ?Sized, B: Pmf + ?Sized>(a: &A, b: &B) -> Result<()> {
    if a.space() != b.space() {
        return Err(Error::DimensionMismatch(format!(
            "state spaces differ: ({}, {}) vs ({}, {})",
            a.space().q(),
            a.space().p(),
            b.space().q(),
            b.space().p()
        )));
    }
    Ok(())
}

/// `½ Σ |a(σ) − b(σ)|` over the union of supports.
pub fn tv<A: Pmf + ?Sized, B: Pmf + ?Sized>(a: &A, b: &B) -> Result<f64> {
    check_same_space(a, b)?;
    let sum = match (a.sparse_support(), b.sparse_support()) {
        (Some(sa), Some(sb)) => {
            let mut keys = sa;
            keys.extend(sb);
            keys.sort_unstable();
            keys.dedup();
            keys.iter().map(|&k| (a.prob(k) - b.prob(k)).abs()).sum::<f64>()
        }
        // one side sparse: the dense side's mass off that support enters directly
        (Some(sa), None) => sparse_dense_l1(a, &sa, b),
        (None, Some(sb)) => sparse_dense_l1(b, &sb, a),
        (None, None) => {
            let n = a.space().num_states()?;
            (0..n).map(|k| (a.prob(k) - b.prob(k)).abs()).sum::<f64>()
        }
    };
    Ok((0.5 * sum).clamp(0.0, 1.0))
}

fn sparse_dense_l1<S: Pmf + ?Sized, D: Pmf + ?Sized>(sparse: &S, support: &[u64], dense: &D) -> f64 {
    let mut on_support = 0.0;
    let mut dense_on_support = 0.0;
    for &k in support {
        let d = dense.prob(k);
        on_support += (sparse.prob(k) - d).abs();
        dense_on_support += d;
    }
    on_support + (1.0 - dense_on_support).max(0.0)
}

/// TV between two full tables.
pub fn tv_exact(a: &ExactDistribution, b: &ExactDistribution) -> Result<f64> {
    check_same_space(a, b)?;
    let sum: f64 = a
        .probs()
        .iter()
        .zip(b.probs())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(0.5 * sum)
}

/// Row-major `q × q` correlation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub q: usize,
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.q + j]
    }
}

/// Binary: `C_ij = mean(s_i s_j)` with `s = 2σ − 1`.
/// Otherwise: `C_ij = mean(1{σ_i = σ_j})`.
pub fn cross_correlation(samples: &SampleSet) -> Result<CorrelationMatrix> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let q = samples.q();
    let binary = samples.p() == 2;
    // accumulate integer counts so the result is exact and order-free
    let mut counts = vec![0i64; q * q];
    for row in samples.rows() {
        for i in 0..q {
            for j in i + 1..q {
                let v = if binary {
                    if row[i] == row[j] {
                        1
                    } else {
                        -1
                    }
                } else {
                    (row[i] == row[j]) as i64
                };
                counts[i * q + j] += v;
            }
        }
    }
    let n = samples.len() as f64;
    let mut values = vec![0.0; q * q];
    for i in 0..q {
        values[i * q + i] = 1.0;
        for j in i + 1..q {
            let v = counts[i * q + j] as f64 / n;
            values[i * q + j] = v;
            values[j * q + i] = v;
        }
    }
    Ok(CorrelationMatrix { q, values })
}

/// Mean absolute entry difference over the strict upper triangle.
pub fn correlation_matrix_error(a: &CorrelationMatrix, b: &CorrelationMatrix) -> Result<f64> {
    if a.q != b.q {
        return Err(Error::DimensionMismatch("correlation matrices differ in size".into()));
    }
    let q = a.q;
    if q < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..q {
        for j in i + 1..q {
            total += (a.get(i, j) - b.get(i, j)).abs();
        }
    }
    Ok(total / (q * (q - 1) / 2) as f64)
}

pub fn cross_correlation_error(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    if a.space() != b.space() {
        return Err(Error::DimensionMismatch("sample sets differ in shape".into()));
    }
    correlation_matrix_error(&cross_correlation(a)?, &cross_correlation(b)?)
}

/// Correlations of an exact law, for exact-mode comparisons.
pub fn cross_correlation_exact(dist: &ExactDistribution) -> CorrelationMatrix {
    let space = dist.space();
    let q = space.q();
    let binary = space.p() == 2;
    let mut values = vec![0.0; q * q];
    let mut config = vec![0u8; q];
    for (idx, &w) in dist.probs().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        space.decode_into(idx as u64, &mut config);
        for i in 0..q {
            for j in i + 1..q {
                let agree = config[i] == config[j];
                values[i * q + j] += w * if binary {
                    if agree {
                        1.0
                    } else {
                        -1.0
                    }
                } else {
                    agree as u8 as f64
                };
            }
        }
    }
    for i in 0..q {
        values[i * q + i] = 1.0;
        for j in i + 1..q {
            values[j * q + i] = values[i * q + j];
        }
    }
    CorrelationMatrix { q, values }
}

/// Kernel bandwidth for [`mmd`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over the pooled samples.
    Median,
}

/// Squared Euclidean distance per differing site under the encoding:
/// `±1` spins (binary) differ by 4, centred indicator vectors by 2.
fn per_site_sq_distance(p: usize) -> f64 {
    if p == 2 {
        4.0
    } else {
        2.0
    }
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn unique_rows(s: &SampleSet) -> Vec<(&[u8], u64)> {
    let mut map: HashMap<&[u8], u64> = HashMap::new();
    for row in s.rows() {
        *map.entry(row).or_insert(0) += 1;
    }
    let mut v: Vec<_> = map.into_iter().collect();
    v.sort_unstable();
    v
}

/// Weighted median of `√(c · d)` over pairs of distinct sample positions.
fn median_distance(pooled: &[(&[u8], u64)], q: usize, per_site: f64) -> f64 {
    let mut hist = vec![0u128; q + 1];
    for (k, (a, ca)) in pooled.iter().enumerate() {
        let ca = *ca as u128;
        hist[0] += ca * (ca - 1) / 2;
        for (b, cb) in &pooled[k + 1..] {
            hist[hamming(a, b)] += ca * *cb as u128;
        }
    }
    let total: u128 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    // lower median of the pair distances
    let target = total.div_ceil(2);
    let mut acc = 0u128;
    for (d, &c) in hist.iter().enumerate() {
        acc += c;
        if acc >= target {
            return (per_site * d as f64).sqrt();
        }
    }
    unreachable!("histogram total reached")
}

/// Unbiased squared MMD between two sample sets with kernel
/// `exp(−‖x − y‖² / (2 σ_b²))` on spin / centred-indicator encodings.
/// Identical rows are grouped, so repetitive data costs little.
pub fn mmd(a: &SampleSet, b: &SampleSet, bandwidth: Bandwidth) -> Result<MetricReport> {
    if a.space() != b.space() {
        return Err(Error::DimensionMismatch("sample sets differ in shape".into()));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Empty("mmd needs at least two samples per set"));
    }
    let q = a.q();
    let per_site = per_site_sq_distance(a.p());
    let ua = unique_rows(a);
    let ub = unique_rows(b);

    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => {
            let mut pooled: HashMap<&[u8], u64> = HashMap::new();
            for &(r, c) in ua.iter().chain(&ub) {
                *pooled.entry(r).or_insert(0) += c;
            }
            let mut pooled: Vec<_> = pooled.into_iter().collect();
            pooled.sort_unstable();
            median_distance(&pooled, q, per_site)
        }
    };
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("degenerate bandwidth {sigma}")));
    }
    let table: Vec<f64> = (0..=q)
        .map(|d| (-(per_site * d as f64) / (2.0 * sigma * sigma)).exp())
        .collect();

    // Σ_{i≠j} k(x_i, x_j) within one set
    let within = |u: &[(&[u8], u64)]| -> f64 {
        let mut s = 0.0;
        for (k, (x, cx)) in u.iter().enumerate() {
            let cx = *cx as f64;
            s += cx * (cx - 1.0);
            for (y, cy) in &u[k + 1..] {
                s += 2.0 * cx * *cy as f64 * table[hamming(x, y)];
            }
        }
        s
    };
    let mut cross = 0.0;
    for (x, cx) in &ua {
        for (y, cy) in &ub {
            cross += *cx as f64 * *cy as f64 * table[hamming(x, y)];
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let value = within(&ua) / (na * (na - 1.0)) + within(&ub) / (nb * (nb - 1.0))
        - 2.0 * cross / (na * nb);
    Ok(MetricReport {
        metric: "mmd2_unbiased".into(),
        value,
        n_a: a.len(),
        n_b: b.len(),
        params: vec![
            ("kernel".into(), "gaussian".into()),
            (
                "bandwidth".into(),
                match bandwidth {
                    Bandwidth::Fixed(_) => format!("{sigma}"),
                    Bandwidth::Median => format!("median:{sigma}"),
                },
            ),
        ],
    })
}
