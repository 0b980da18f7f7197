//! Network inputs and the centred indicator embedding.

use crate::error::{Error, Result};
use crate::forward::NoiseSchedule;
use crate::state::Site;

/// `Φ(r)`: entry `s` is `1 − 1/p` when `s = r`, else `−1/p`.
pub fn phi(r: usize, p: usize) -> Vec<f64> {
    let off = -1.0 / p as f64;
    let mut v = vec![off; p];
    v[r] = 1.0 + off;
    v
}

/// `⟨Φ(r), y⟩ = y_r − mean(y)`.
#[inline]
pub fn phi_dot(r: usize, y: &[f64]) -> f64 {
    y[r] - y.iter().sum::<f64>() / y.len() as f64
}

/// Width of the encoded `σ_{−u}`: one signed value per site for binary
/// alphabets, one `Φ` block per site otherwise.
pub fn context_dim(q: usize, p: usize) -> usize {
    if p == 2 {
        q - 1
    } else {
        (q - 1) * p
    }
}

/// `1 + q + context_dim`: time, one-hot coordinate, context.
pub fn input_dim(q: usize, p: usize) -> usize {
    1 + q + context_dim(q, p)
}

/// Encodes `(n, u, σ_{−u})` where `context` already omits site `u`.
pub fn encode_input(schedule: &NoiseSchedule, n: usize, site: Site, context: &[u8]) -> Result<Vec<f64>> {
    let (q, p) = (schedule.q, schedule.p);
    if site.index() >= q {
        return Err(Error::InvalidParameter(format!("site {site} outside 1..={q}")));
    }
    if context.len() != q - 1 {
        return Err(Error::DimensionMismatch(format!(
            "context has {} symbols, expected {}",
            context.len(),
            q - 1
        )));
    }
    if let Some(&s) = context.iter().find(|&&s| s as usize >= p) {
        return Err(Error::SymbolOutOfRange { site: 0, symbol: s, p });
    }
    let mut out = vec![0.0; input_dim(q, p)];
    out[0] = time_feature(n, schedule.steps);
    out[1 + site.index()] = 1.0;
    encode_context(context.iter().copied(), p, &mut out[1 + q..]);
    Ok(out)
}

#[inline]
pub(crate) fn time_feature(n: usize, steps: usize) -> f64 {
    if steps == 0 {
        0.0
    } else {
        n as f64 / steps as f64
    }
}

fn encode_context(context: impl Iterator<Item = u8>, p: usize, out: &mut [f64]) {
    if p == 2 {
        for (o, s) in out.iter_mut().zip(context) {
            *o = 2.0 * s as f64 - 1.0;
        }
    } else {
        let off = -1.0 / p as f64;
        for (block, s) in out.chunks_exact_mut(p).zip(context) {
            block.fill(off);
            block[s as usize] += 1.0;
        }
    }
}

/// Same as [`encode_input`] from a full row, skipping `row[u]`. No checks.
pub(crate) fn encode_row_into(n: usize, steps: usize, site: Site, row: &[u8], p: usize, out: &mut [f64]) {
    let q = row.len();
    out[..1 + q].fill(0.0);
    out[0] = time_feature(n, steps);
    out[1 + site.index()] = 1.0;
    let u = site.index();
    let context = row.iter().enumerate().filter(|(i, _)| *i != u).map(|(_, &s)| s);
    encode_context(context, p, &mut out[1 + q..]);
}
