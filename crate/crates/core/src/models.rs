//! Pairwise Gibbs models `μ(σ) ∝ exp(H(σ))`.
//!
//! Two Hamiltonians are provided:
//!
//! - [`IsingModel`]: `H(σ) = Σ J_ij s_i s_j + Σ h_i s_i` with spins `s = 2σ - 1`.
//! - [`PottsModel`]: `H(σ) = -Σ J_ij 1{σ_i = σ_j} - Σ h_{i,σ_i}`.
//!
//! Both are used with the same `exp(+H)` weighting. The Edwards-Anderson
//! constructors place the model on an `L × L` periodic lattice where every
//! site couples to its right and bottom neighbour. On a 2×2 lattice the
//! wraparound produces each edge twice; duplicates are merged by summing
//! their couplings so the Hamiltonian value is unchanged.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{ExactDistribution, SampleSet};
use crate::error::{Error, Result};
use crate::state::{increment, Configuration, Guard, Site, StateSpace};

/// A pairwise interaction between 0-based sites `i < j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub coupling: f64,
}

/// Common interface of the Hamiltonians.
pub trait EnergyModel: Sync {
    fn space(&self) -> StateSpace;

    fn energy(&self, config: &[u8]) -> f64;

    /// `H_u(r, σ_{-u})` for every symbol `r`, keeping only the terms of `H`
    /// that involve site `u`. Differences between entries equal differences
    /// of the full Hamiltonian.
    fn site_energies(&self, config: &[u8], site: Site, out: &mut [f64]);
}

fn check_edges(q: usize, edges: &[Edge]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for e in edges {
        if e.i >= e.j || e.j >= q {
            return Err(Error::InvalidParameter(format!(
                "edge ({}, {}) must satisfy 1 <= i < j <= {q}",
                e.i + 1,
                e.j + 1
            )));
        }
        if !e.coupling.is_finite() {
            return Err(Error::NonFinite(format!("coupling on edge ({}, {})", e.i + 1, e.j + 1)));
        }
        if !seen.insert((e.i, e.j)) {
            return Err(Error::InvalidParameter(format!(
                "duplicate edge ({}, {})",
                e.i + 1,
                e.j + 1
            )));
        }
    }
    Ok(())
}

fn adjacency(q: usize, edges: &[Edge]) -> Vec<Vec<(usize, f64)>> {
    let mut adj = vec![Vec::new(); q];
    for e in edges {
        adj[e.i].push((e.j, e.coupling));
        adj[e.j].push((e.i, e.coupling));
    }
    adj
}

/// Merges repeated (unordered) site pairs by summing couplings.
fn merge_edges(raw: impl IntoIterator<Item = (usize, usize, f64)>) -> Vec<Edge> {
    let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (a, b, c) in raw {
        let key = (a.min(b), a.max(b));
        *merged.entry(key).or_insert(0.0) += c;
    }
    merged
        .into_iter()
        .map(|((i, j), coupling)| Edge { i, j, coupling })
        .collect()
}

/// Right and bottom neighbour pairs of an `L × L` periodic lattice, in
/// row-major site order (right first).
fn periodic_lattice_pairs(l: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(2 * l * l);
    for r in 0..l {
        for c in 0..l {
            let site = r * l + c;
            pairs.push((site, r * l + (c + 1) % l));
            pairs.push((site, ((r + 1) % l) * l + c));
        }
    }
    pairs
}

fn random_sign<R: Rng + ?Sized>(rng: &mut R, magnitude: f64) -> f64 {
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IsingModel {
    q: usize,
    edges: Vec<Edge>,
    fields: Vec<f64>,
    adj: Vec<Vec<(usize, f64)>>,
}

impl IsingModel {
    pub fn new(q: usize, edges: Vec<Edge>, fields: Vec<f64>) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidParameter("q must be at least 1".into()));
        }
        if fields.len() != q {
            return Err(Error::DimensionMismatch(format!(
                "{} fields for {q} sites",
                fields.len()
            )));
        }
        if fields.iter().any(|h| !h.is_finite()) {
            return Err(Error::NonFinite("field".into()));
        }
        check_edges(q, &edges)?;
        let adj = adjacency(q, &edges);
        Ok(Self {
            q,
            edges,
            fields,
            adj,
        })
    }

    /// Complete graph with couplings uniform in `±coupling_scale` and fields
    /// uniform in `±field_scale`.
    pub fn random_dense<R: Rng + ?Sized>(
        q: usize,
        coupling_scale: f64,
        field_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut edges = Vec::new();
        for i in 0..q {
            for j in i + 1..q {
                edges.push(Edge {
                    i,
                    j,
                    coupling: rng.random_range(-1.0..1.0) * coupling_scale,
                });
            }
        }
        let fields = (0..q)
            .map(|_| rng.random_range(-1.0..1.0) * field_scale)
            .collect();
        Self::new(q, edges, fields).expect("generated model is valid")
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn fields(&self) -> &[f64] {
        &self.fields
    }
}

#[inline]
fn spin(s: u8) -> f64 {
    2.0 * s as f64 - 1.0
}

impl EnergyModel for IsingModel {
    fn space(&self) -> StateSpace {
        StateSpace::new(self.q, 2).expect("q >= 1")
    }

    fn energy(&self, config: &[u8]) -> f64 {
        let pair: f64 = self
            .edges
            .iter()
            .map(|e| e.coupling * spin(config[e.i]) * spin(config[e.j]))
            .sum();
        let field: f64 = self
            .fields
            .iter()
            .zip(config)
            .map(|(h, &s)| h * spin(s))
            .sum();
        pair + field
    }

    fn site_energies(&self, config: &[u8], site: Site, out: &mut [f64]) {
        let u = site.index();
        let local = self.fields[u]
            + self.adj[u]
                .iter()
                .map(|&(j, c)| c * spin(config[j]))
                .sum::<f64>();
        out[0] = -local;
        out[1] = local;
    }
}

/// Edwards-Anderson lattice parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EaParams {
    /// Lattice side `L`; the model has `L²` sites.
    pub side: usize,
    pub coupling: f64,
    pub field: f64,
    pub seed: u64,
}

impl EaParams {
    fn validate(&self) -> Result<()> {
        if self.side < 2 {
            return Err(Error::InvalidParameter(format!(
                "lattice side must be at least 2, got {}",
                self.side
            )));
        }
        if !(self.coupling >= 0.0 && self.field >= 0.0) {
            return Err(Error::InvalidParameter("magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

/// Edwards-Anderson Ising model: `J_ij ∈ {±J}`, `h_i ∈ {±h}` i.i.d.
pub fn ea_ising(params: EaParams) -> Result<IsingModel> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let l = params.side;
    let raw: Vec<(usize, usize, f64)> = periodic_lattice_pairs(l)
        .into_iter()
        .map(|(a, b)| (a, b, random_sign(&mut rng, params.coupling)))
        .collect();
    let fields = (0..l * l)
        .map(|_| random_sign(&mut rng, params.field))
        .collect();
    IsingModel::new(l * l, merge_edges(raw), fields)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PottsModel {
    space: StateSpace,
    edges: Vec<Edge>,
    /// Row-major `q × p` table of `h_{i,s}`.
    fields: Vec<f64>,
    adj: Vec<Vec<(usize, f64)>>,
}

impl PottsModel {
    pub fn new(q: usize, p: usize, edges: Vec<Edge>, fields: Vec<f64>) -> Result<Self> {
        let space = StateSpace::new(q, p)?;
        if fields.len() != q * p {
            return Err(Error::DimensionMismatch(format!(
                "{} fields for a {q}x{p} table",
                fields.len()
            )));
        }
        if fields.iter().any(|h| !h.is_finite()) {
            return Err(Error::NonFinite("field".into()));
        }
        check_edges(q, &edges)?;
        let adj = adjacency(q, &edges);
        Ok(Self {
            space,
            edges,
            fields,
            adj,
        })
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn field(&self, i: usize, s: usize) -> f64 {
        self.fields[i * self.space.p() + s]
    }

    pub fn fields(&self) -> &[f64] {
        &self.fields
    }
}

impl EnergyModel for PottsModel {
    fn space(&self) -> StateSpace {
        self.space
    }

    fn energy(&self, config: &[u8]) -> f64 {
        let pair: f64 = self
            .edges
            .iter()
            .filter(|e| config[e.i] == config[e.j])
            .map(|e| e.coupling)
            .sum();
        let field: f64 = config
            .iter()
            .enumerate()
            .map(|(i, &s)| self.field(i, s as usize))
            .sum();
        -pair - field
    }

    fn site_energies(&self, config: &[u8], site: Site, out: &mut [f64]) {
        let u = site.index();
        for (r, o) in out.iter_mut().enumerate() {
            *o = -self.field(u, r);
        }
        for &(j, c) in &self.adj[u] {
            out[config[j] as usize] -= c;
        }
    }
}

/// Edwards-Anderson Potts model on an `L × L` periodic lattice over `p` symbols.
pub fn ea_potts(side: usize, p: usize, coupling: f64, field: f64, seed: u64) -> Result<PottsModel> {
    EaParams {
        side,
        coupling,
        field,
        seed,
    }
    .validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<(usize, usize, f64)> = periodic_lattice_pairs(side)
        .into_iter()
        .map(|(a, b)| (a, b, random_sign(&mut rng, coupling)))
        .collect();
    let q = side * side;
    let fields = (0..q * p).map(|_| random_sign(&mut rng, field)).collect();
    PottsModel::new(q, p, merge_edges(raw), fields)
}

/// Either model, as stored in model files.
#[derive(Clone, Debug, PartialEq)]
pub enum GibbsModel {
    Ising(IsingModel),
    Potts(PottsModel),
}

impl EnergyModel for GibbsModel {
    fn space(&self) -> StateSpace {
        match self {
            Self::Ising(m) => m.space(),
            Self::Potts(m) => m.space(),
        }
    }

    fn energy(&self, config: &[u8]) -> f64 {
        match self {
            Self::Ising(m) => m.energy(config),
            Self::Potts(m) => m.energy(config),
        }
    }

    fn site_energies(&self, config: &[u8], site: Site, out: &mut [f64]) {
        match self {
            Self::Ising(m) => m.site_energies(config, site, out),
            Self::Potts(m) => m.site_energies(config, site, out),
        }
    }
}

impl From<IsingModel> for GibbsModel {
    fn from(m: IsingModel) -> Self {
        Self::Ising(m)
    }
}

impl From<PottsModel> for GibbsModel {
    fn from(m: PottsModel) -> Self {
        Self::Potts(m)
    }
}

/// Checked energy evaluation.
pub fn energy<M: EnergyModel + ?Sized>(model: &M, config: &[u8]) -> Result<f64> {
    model.space().validate(config)?;
    Ok(model.energy(config))
}

/// Full Gibbs table, refusing state spaces beyond `guard`.
pub fn exact_distribution_guarded<M: EnergyModel + ?Sized>(
    model: &M,
    guard: Guard,
) -> Result<ExactDistribution> {
    let space = model.space();
    let n = space.table_len(guard)?;
    let mut config = Configuration::zeros(space.q());
    let mut log_weights = Vec::with_capacity(n);
    for _ in 0..n {
        log_weights.push(model.energy(&config));
        increment(&mut config, space.p());
    }
    ExactDistribution::from_log_weights(space, log_weights)
}

/// Full Gibbs table under the default guard.
pub fn exact_distribution<M: EnergyModel + ?Sized>(model: &M) -> Result<ExactDistribution> {
    exact_distribution_guarded(model, Guard::default())
}

/// Softmax of `energies` written into the same buffer.
pub(crate) fn softmax_in_place(energies: &mut [f64]) {
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for e in energies.iter_mut() {
        *e = (*e - max).exp();
        total += *e;
    }
    energies.iter_mut().for_each(|e| *e /= total);
}

/// `μ(σ_u = r | σ_{-u})` from the local terms of the Hamiltonian only.
pub fn exact_conditional<M: EnergyModel + ?Sized>(model: &M, config: &[u8], site: Site) -> Vec<f64> {
    let mut out = vec![0.0; model.space().p()];
    model.site_energies(config, site, &mut out);
    softmax_in_place(&mut out);
    out
}

/// I.i.d. draws from a table by cumulative inversion.
pub fn sample_exact(dist: &ExactDistribution, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be positive".into()));
    }
    let space = crate::dist::Pmf::space(dist);
    let sampler = dist.sampler();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0u8; n * space.q()];
    for row in data.chunks_exact_mut(space.q()) {
        space.decode_into(sampler.sample(&mut rng), row);
    }
    SampleSet::from_flat(space, data, format!("exact sampler seed={seed}"))
}

/// Single-site heat-bath (Glauber) chain. Sites are visited in order each
/// sweep; after `burn_in` sweeps every `thinning`-th sweep is recorded.
pub fn sample_glauber<M: EnergyModel + ?Sized>(
    model: &M,
    n: usize,
    burn_in: usize,
    thinning: usize,
    seed: u64,
) -> Result<SampleSet> {
    if burn_in == 0 || thinning == 0 {
        return Err(Error::InvalidParameter("burn_in and thinning must be at least 1".into()));
    }
    let space = model.space();
    let (q, p) = (space.q(), space.p());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state: Vec<u8> = (0..q).map(|_| rng.random_range(0..p) as u8).collect();
    let mut probs = vec![0.0; p];

    let mut sweep = |state: &mut Vec<u8>, rng: &mut ChaCha8Rng| {
        for u in 0..q {
            model.site_energies(state, Site::from_index(u), &mut probs);
            softmax_in_place(&mut probs);
            state[u] = draw_symbol(&probs, rng);
        }
    };

    for _ in 0..burn_in {
        sweep(&mut state, &mut rng);
    }
    let mut data = Vec::with_capacity(n * q);
    for _ in 0..n {
        for _ in 0..thinning {
            sweep(&mut state, &mut rng);
        }
        data.extend_from_slice(&state);
    }
    SampleSet::from_flat(
        space,
        data,
        format!("glauber sampler seed={seed} burn_in={burn_in} thinning={thinning}"),
    )
}

/// Draws an index from a probability vector.
#[inline]
pub(crate) fn draw_symbol<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> u8 {
    let mut target = rng.random::<f64>();
    for (r, &w) in probs.iter().enumerate() {
        if target < w {
            return r as u8;
        }
        target -= w;
    }
    // round-off: fall back to the last symbol with mass
    probs.iter().rposition(|&w| w > 0.0).unwrap_or(probs.len() - 1) as u8
}

const MODEL_FORMAT: &str = "condiff-model/1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    kind: String,
    q: usize,
    p: usize,
    /// `[i, j, J_ij]` with 1-based sites.
    edges: Vec<(usize, usize, f64)>,
    /// Ising: length `q`. Potts: `q` rows of length `p`.
    fields: serde_json::Value,
}

impl GibbsModel {
    pub fn to_json(&self) -> Result<String> {
        let edges_of = |edges: &[Edge]| -> Vec<(usize, usize, f64)> {
            edges.iter().map(|e| (e.i + 1, e.j + 1, e.coupling)).collect()
        };
        let file = match self {
            Self::Ising(m) => ModelFile {
                format: MODEL_FORMAT.into(),
                kind: "ising".into(),
                q: m.q,
                p: 2,
                edges: edges_of(&m.edges),
                fields: serde_json::to_value(&m.fields)?,
            },
            Self::Potts(m) => ModelFile {
                format: MODEL_FORMAT.into(),
                kind: "potts".into(),
                q: m.space.q(),
                p: m.space.p(),
                edges: edges_of(&m.edges),
                fields: serde_json::to_value(
                    m.fields.chunks(m.space.p()).collect::<Vec<_>>(),
                )?,
            },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Format(format!(
                "unsupported model format {:?}",
                file.format
            )));
        }
        let edges = file
            .edges
            .iter()
            .map(|&(i, j, coupling)| {
                if i == 0 || j == 0 {
                    return Err(Error::Format("edge sites are 1-based".into()));
                }
                Ok(Edge {
                    i: i - 1,
                    j: j - 1,
                    coupling,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match file.kind.as_str() {
            "ising" => {
                if file.p != 2 {
                    return Err(Error::Format("ising models are binary".into()));
                }
                let fields: Vec<f64> = serde_json::from_value(file.fields)?;
                Ok(Self::Ising(IsingModel::new(file.q, edges, fields)?))
            }
            "potts" => {
                let rows: Vec<Vec<f64>> = serde_json::from_value(file.fields)?;
                if rows.iter().any(|r| r.len() != file.p) {
                    return Err(Error::Format("potts field rows must have p entries".into()));
                }
                Ok(Self::Potts(PottsModel::new(
                    file.q,
                    file.p,
                    edges,
                    rows.concat(),
                )?))
            }
            other => Err(Error::Format(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{empirical_from_samples, Pmf};

    fn ising(q: usize, edges: &[(usize, usize, f64)], fields: &[f64]) -> IsingModel {
        IsingModel::new(
            q,
            edges
                .iter()
                .map(|&(i, j, coupling)| Edge { i, j, coupling })
                .collect(),
            fields.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn ea_ising_shape() {
        let m = ea_ising(EaParams {
            side: 5,
            coupling: 1.2,
            field: 0.05,
            seed: 3,
        })
        .unwrap();
        assert_eq!(m.q(), 25);
        assert_eq!(m.edges().len(), 50);
        assert!(m.edges().iter().all(|e| (e.coupling.abs() - 1.2).abs() < 1e-15));
        assert!(m.fields().iter().all(|h| (h.abs() - 0.05).abs() < 1e-15));
        // both signs show up
        assert!(m.edges().iter().any(|e| e.coupling > 0.0));
        assert!(m.edges().iter().any(|e| e.coupling < 0.0));
    }

    #[test]
    fn ea_ising_two_by_two_merges_wraparound() {
        let params = EaParams {
            side: 2,
            coupling: 1.0,
            field: 0.1,
            seed: 11,
        };
        assert_eq!(periodic_lattice_pairs(2).len(), 8);
        let m = ea_ising(params).unwrap();
        assert_eq!(m.q(), 4);
        // 8 slots collapse onto the 4 distinct neighbour pairs
        let pairs: Vec<_> = m.edges().iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
        assert!(m
            .edges()
            .iter()
            .all(|e| [-2.0, 0.0, 2.0].contains(&e.coupling)));
        // the merged model reproduces the raw slot Hamiltonian
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw: Vec<(usize, usize, f64)> = periodic_lattice_pairs(2)
            .into_iter()
            .map(|(a, b)| (a, b, random_sign(&mut rng, 1.0)))
            .collect();
        let mut config = [0u8; 4];
        loop {
            let slot_energy: f64 = raw
                .iter()
                .map(|&(a, b, c)| c * spin(config[a]) * spin(config[b]))
                .sum::<f64>()
                + m.fields()
                    .iter()
                    .zip(&config)
                    .map(|(h, &s)| h * spin(s))
                    .sum::<f64>();
            assert!((slot_energy - m.energy(&config)).abs() < 1e-12);
            if !increment(&mut config, 2) {
                break;
            }
        }
    }

    #[test]
    fn ea_is_deterministic_in_seed() {
        let params = EaParams {
            side: 4,
            coupling: 1.2,
            field: 0.05,
            seed: 99,
        };
        assert_eq!(ea_ising(params).unwrap(), ea_ising(params).unwrap());
        assert_eq!(
            ea_potts(3, 3, 1.0, 0.2, 5).unwrap(),
            ea_potts(3, 3, 1.0, 0.2, 5).unwrap()
        );
        assert!(ea_ising(EaParams { side: 1, ..params }).is_err());
        assert!(ea_ising(EaParams { coupling: -1.0, ..params }).is_err());
    }

    #[test]
    fn ising_energy_examples() {
        let m = ising(1, &[], &[0.3]);
        assert!((m.energy(&[1]) - 0.3).abs() < 1e-15);
        let m = ising(2, &[(0, 1, 1.0)], &[0.0, 0.0]);
        assert!((m.energy(&[1, 1]) - 1.0).abs() < 1e-15);
        assert!(energy(&m, &[1, 1, 0]).is_err());
    }

    #[test]
    fn potts_energy_examples() {
        let fields = vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6];
        let m = PottsModel::new(2, 3, vec![], fields).unwrap();
        assert!((m.energy(&[2, 0]) - (-(0.3 + -0.4))).abs() < 1e-15);
        let m = ea_potts(2, 3, 0.0, 0.0, 1).unwrap();
        assert_eq!(m.space().num_states().unwrap(), 81);
        let d = exact_distribution(&m).unwrap();
        assert!(d.probs().iter().all(|v| (v - 1.0 / 81.0).abs() < 1e-15));
    }

    #[test]
    fn potts_agreement_minimizes_coupling_energy() {
        // ferromagnetic (J > 0) edges with zero fields
        let edges = vec![
            Edge { i: 0, j: 1, coupling: 1.0 },
            Edge { i: 1, j: 2, coupling: 1.0 },
        ];
        let m = PottsModel::new(3, 3, edges, vec![0.0; 9]).unwrap();
        assert!((m.energy(&[1, 1, 1]) + 2.0).abs() < 1e-15);
        assert!(m.energy(&[1, 1, 1]) < m.energy(&[0, 1, 2]));
        assert!(m.energy(&[1, 1, 1]) < m.energy(&[1, 1, 0]));
    }

    #[test]
    fn exact_distribution_examples() {
        let d = exact_distribution(&ising(3, &[], &[0.0; 3])).unwrap();
        assert!(d.probs().iter().all(|v| (v - 0.125).abs() < 1e-15));

        let h: f64 = 0.7;
        let d = exact_distribution(&ising(1, &[], &[h])).unwrap();
        let expect = h.exp() / (h.exp() + (-h).exp());
        assert!((d.probs()[1] - expect).abs() < 1e-15);

        let m = ea_ising(EaParams { side: 3, coupling: 1.2, field: 0.05, seed: 1 }).unwrap();
        let d = exact_distribution(&m).unwrap();
        assert!((d.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_distribution_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = IsingModel::random_dense(4, 1.0, 0.5, &mut rng);
        let d = exact_distribution(&m).unwrap();
        // a constant shift enters as an extra constant inside the log-weights
        let space = m.space();
        let mut config = Configuration::zeros(4);
        let mut shifted = Vec::new();
        for _ in 0..16 {
            shifted.push(m.energy(&config) + 123.4);
            increment(&mut config, 2);
        }
        let d2 = ExactDistribution::from_log_weights(space, shifted).unwrap();
        for (a, b) in d.probs().iter().zip(d2.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn guard_refuses_large_tables() {
        let m = ea_ising(EaParams { side: 5, coupling: 1.2, field: 0.05, seed: 1 }).unwrap();
        assert!(matches!(
            exact_distribution(&m),
            Err(Error::StateSpaceTooLarge { .. })
        ));
    }

    /// Brute force: conditional as the ratio of table entries over the fibre.
    fn conditional_from_table(d: &ExactDistribution, config: &[u8], site: Site) -> Vec<f64> {
        let space = Pmf::space(d);
        let mut c = config.to_vec();
        let weights: Vec<f64> = (0..space.p())
            .map(|r| {
                c[site.index()] = r as u8;
                d.prob(space.encode(&c).unwrap())
            })
            .collect();
        let z: f64 = weights.iter().sum();
        weights.iter().map(|w| w / z).collect()
    }

    #[test]
    fn exact_conditional_matches_table_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let models: Vec<GibbsModel> = vec![
            IsingModel::random_dense(3, 1.5, 0.8, &mut rng).into(),
            IsingModel::random_dense(3, 0.3, 2.0, &mut rng).into(),
            ea_potts(2, 3, 1.0, 0.5, 4).unwrap().into(),
            PottsModel::new(
                3,
                4,
                vec![Edge { i: 0, j: 2, coupling: -0.7 }, Edge { i: 1, j: 2, coupling: 1.3 }],
                (0..12).map(|k| (k as f64 * 0.37).sin()).collect(),
            )
            .unwrap()
            .into(),
        ];
        for m in &models {
            let d = exact_distribution(m).unwrap();
            let space = m.space();
            for idx in 0..space.num_states().unwrap() {
                let config = space.decode(idx).unwrap();
                for u in 0..space.q() {
                    let site = Site::from_index(u);
                    let a = exact_conditional(m, &config, site);
                    let b = conditional_from_table(&d, &config, site);
                    for (x, y) in a.iter().zip(&b) {
                        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
                    }
                }
            }
        }
    }

    #[test]
    fn exact_conditional_single_spin() {
        let h: f64 = 0.3;
        let c = exact_conditional(&ising(1, &[], &[h]), &[0], Site::from_index(0));
        assert!((c[1] - h.exp() / (h.exp() + (-h).exp())).abs() < 1e-15);
        let c = exact_conditional(&ising(2, &[], &[0.0, 0.0]), &[1, 0], Site::from_index(1));
        assert_eq!(c, vec![0.5, 0.5]);
    }

    #[test]
    fn sample_exact_properties() {
        let space = StateSpace::new(4, 2).unwrap();
        let point = ExactDistribution::point_mass(space, 6, Guard::default()).unwrap();
        let s = sample_exact(&point, 50, 1).unwrap();
        assert!(s.rows().all(|r| r == [0, 1, 1, 0]));

        let uniform = ExactDistribution::uniform(space, Guard::default()).unwrap();
        let n = 100_000;
        let s = sample_exact(&uniform, n, 2).unwrap();
        assert_eq!(s, sample_exact(&uniform, n, 2).unwrap());
        let emp = empirical_from_samples(&s).unwrap();
        let sd = (n as f64 * (1.0 / 16.0) * (15.0 / 16.0)).sqrt();
        for idx in 0..16 {
            assert!((emp.count(idx) as f64 - n as f64 / 16.0).abs() < 5.0 * sd);
        }
        assert!(sample_exact(&uniform, 0, 2).is_err());
    }

    #[test]
    fn glauber_uniform_marginals() {
        let m = ising(3, &[], &[0.0; 3]);
        let n = 10_000;
        let s = sample_glauber(&m, n, 10, 1, 4).unwrap();
        assert_eq!(s, sample_glauber(&m, n, 10, 1, 4).unwrap());
        let sd = (n as f64 * 0.25).sqrt();
        for u in 0..3 {
            let ones = s.rows().filter(|r| r[u] == 1).count() as f64;
            assert!((ones - n as f64 / 2.0).abs() < 5.0 * sd);
        }
        assert!(sample_glauber(&m, 10, 0, 1, 4).is_err());
        assert!(sample_glauber(&m, 10, 1, 0, 4).is_err());
    }

    #[test]
    fn glauber_ferromagnetic_pair_agrees() {
        let j = 2.0;
        let m = ising(2, &[(0, 1, j)], &[0.0, 0.0]);
        let d = exact_distribution(&m).unwrap();
        let p_agree = d.probs()[0] + d.probs()[3];
        assert!(p_agree > 0.9);
        let n = 20_000;
        let s = sample_glauber(&m, n, 1000, 1, 8).unwrap();
        let agree = s.rows().filter(|r| r[0] == r[1]).count() as f64 / n as f64;
        assert!(agree > 0.9);
        // consecutive sweeps are correlated, so allow a wide band around the exact value
        assert!((agree - p_agree).abs() < 0.02, "{agree} vs {p_agree}");
    }

    #[test]
    fn glauber_conditionals_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let m = IsingModel::random_dense(3, 0.8, 0.4, &mut rng);
        let s = sample_glauber(&m, 60_000, 100, 2, 9).unwrap();
        // empirical P(σ_1 = 1 | σ_2, σ_3) for each context
        for ctx in 0..4u8 {
            let (b, c) = (ctx & 1, ctx >> 1);
            let rows: Vec<&[u8]> = s.rows().filter(|r| r[1] == b && r[2] == c).collect();
            let freq = rows.iter().filter(|r| r[0] == 1).count() as f64 / rows.len() as f64;
            let exact = exact_conditional(&m, &[0, b, c], Site::from_index(0))[1];
            assert!((freq - exact).abs() < 0.03, "ctx {ctx}: {freq} vs {exact}");
        }
    }

    #[test]
    fn model_file_round_trip() {
        let m: GibbsModel = ea_ising(EaParams { side: 3, coupling: 1.2, field: 0.05, seed: 2 })
            .unwrap()
            .into();
        let back = GibbsModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let m: GibbsModel = ea_potts(2, 3, 1.0, 0.3, 8).unwrap().into();
        let text = m.to_json().unwrap();
        assert!(text.contains("condiff-model/1"));
        assert_eq!(GibbsModel::from_json(&text).unwrap(), m);
        assert!(GibbsModel::from_json(&text.replace("condiff-model/1", "other/9")).is_err());
    }

    #[test]
    fn model_validation() {
        assert!(IsingModel::new(2, vec![Edge { i: 1, j: 0, coupling: 1.0 }], vec![0.0; 2]).is_err());
        assert!(IsingModel::new(
            3,
            vec![Edge { i: 0, j: 1, coupling: 1.0 }, Edge { i: 0, j: 1, coupling: 2.0 }],
            vec![0.0; 3]
        )
        .is_err());
        assert!(IsingModel::new(2, vec![Edge { i: 0, j: 1, coupling: f64::NAN }], vec![0.0; 2]).is_err());
        assert!(PottsModel::new(2, 3, vec![], vec![0.0; 5]).is_err());
    }
}
