//! The learned conditional model and its screening loss.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedding::{encode_row_into, input_dim};
use super::mlp::{Mlp, MlpShape};
use crate::error::{Error, Result};
use crate::forward::NoiseSchedule;
use crate::reverse::ConditionalOracle;
use crate::state::{Configuration, Site, StateSpace};

/// One network for all steps, or one per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    #[default]
    Global,
    PerStep,
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "per-step" | "local" => Ok(Self::PerStep),
            _ => Err(Error::InvalidParameter(format!("unknown topology {s:?}"))),
        }
    }
}

/// A noised configuration at step `n`, with the site whose symbol the
/// network must explain.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub n: usize,
    pub site: Site,
    pub config: Configuration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalModel {
    schedule: NoiseSchedule,
    topology: Topology,
    nets: Vec<Mlp>,
}

impl ConditionalModel {
    pub fn new(schedule: NoiseSchedule, topology: Topology, nets: Vec<Mlp>) -> Result<Self> {
        let expected = match topology {
            Topology::Global => 1,
            Topology::PerStep => schedule.steps,
        };
        if nets.len() != expected || expected == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{topology:?} topology over {} steps needs {expected} networks, got {}",
                schedule.steps,
                nets.len()
            )));
        }
        let d_in = input_dim(schedule.q, schedule.p);
        for net in &nets {
            let s = net.shape();
            if s.d_in != d_in || s.p != schedule.p {
                return Err(Error::DimensionMismatch(format!("network shape {s:?} does not fit the schedule")));
            }
        }
        Ok(Self { schedule, topology, nets })
    }

    pub fn shape_for(schedule: &NoiseSchedule, width: usize, depth: usize) -> MlpShape {
        MlpShape {
            d_in: input_dim(schedule.q, schedule.p),
            width,
            depth,
            p: schedule.p,
        }
    }

    fn network_count(schedule: &NoiseSchedule, topology: Topology) -> usize {
        match topology {
            Topology::Global => 1,
            Topology::PerStep => schedule.steps,
        }
    }

    /// Fresh networks; network `k` draws from stream `k` of `seed`.
    pub fn init(schedule: NoiseSchedule, topology: Topology, width: usize, depth: usize, seed: u64) -> Result<Self> {
        let shape = Self::shape_for(&schedule, width, depth);
        let nets = (0..Self::network_count(&schedule, topology))
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                Mlp::init(shape, &mut rng)
            })
            .collect::<Result<_>>()?;
        Self::new(schedule, topology, nets)
    }

    pub fn zeros(schedule: NoiseSchedule, topology: Topology, width: usize, depth: usize) -> Result<Self> {
        let shape = Self::shape_for(&schedule, width, depth);
        let nets = (0..Self::network_count(&schedule, topology))
            .map(|_| Mlp::zeros(shape))
            .collect::<Result<_>>()?;
        Self::new(schedule, topology, nets)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn nets(&self) -> &[Mlp] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [Mlp] {
        &mut self.nets
    }

    pub fn num_params(&self) -> usize {
        self.nets.iter().map(|n| n.params().len()).sum()
    }

    /// Network that serves step `n`.
    pub fn net_index(&self, n: usize) -> usize {
        match self.topology {
            Topology::Global => 0,
            Topology::PerStep => n.min(self.nets.len() - 1),
        }
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n >= self.schedule.steps {
            return Err(Error::InvalidParameter(format!("step {n} outside 0..{}", self.schedule.steps)));
        }
        Ok(())
    }

    /// Encodes full rows (site `u` is skipped) for one `(n, u)`.
    pub(crate) fn encode_rows(&self, n: usize, site: Site, rows: &[u8]) -> Array2<f64> {
        let (q, p) = (self.schedule.q, self.schedule.p);
        let mut x = Array2::zeros((rows.len() / q, input_dim(q, p)));
        for (row, mut out) in rows.chunks_exact(q).zip(x.rows_mut()) {
            encode_row_into(n, self.schedule.steps, site, row, p, out.as_slice_mut().expect("standard layout"));
        }
        x
    }

    /// Raw network outputs `NN(n, u, σ_{−u})` for every row.
    pub fn outputs(&self, n: usize, site: Site, rows: &[u8]) -> Result<Array2<f64>> {
        self.check_step(n)?;
        self.nets[self.net_index(n)].forward(self.encode_rows(n, site, rows).view())
    }
}

/// Softmax over `⟨Φ(r), y⟩ = y_r − mean(y)`; the mean cancels.
pub(crate) fn softmax_rows(out: &mut [f64], p: usize) -> Result<()> {
    for row in out.chunks_exact_mut(p) {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(())
}

impl ConditionalOracle for ConditionalModel {
    fn space(&self) -> StateSpace {
        self.schedule.space()
    }

    fn steps(&self) -> usize {
        self.schedule.steps
    }

    fn conditional(&self, n: usize, site: Site, config: &[u8]) -> Result<Vec<f64>> {
        self.space().validate(config)?;
        let mut out = vec![0.0; self.schedule.p];
        self.conditional_batch(n, site, config, &mut out)?;
        Ok(out)
    }

    fn conditional_batch(&self, n: usize, site: Site, rows: &[u8], out: &mut [f64]) -> Result<()> {
        let y = self.outputs(n, site, rows)?;
        out.copy_from_slice(y.as_slice().expect("standard layout"));
        softmax_rows(out, self.schedule.p)
    }
}

/// Sum over rows of `w_i · exp(−⟨Φ(s_i), y_i⟩)`. When `d_out` is given it
/// receives the derivative of `scale ·` that sum with respect to `y`.
pub(crate) fn screening_terms(
    y: &Array2<f64>,
    symbols: &[u8],
    weights: Option<&[f64]>,
    scale: f64,
    mut d_out: Option<&mut Array2<f64>>,
) -> f64 {
    let p = y.ncols();
    let inv_p = 1.0 / p as f64;
    let mut total = 0.0;
    for (i, (row, &s)) in y.rows().into_iter().zip(symbols).enumerate() {
        let mean = row.sum() * inv_p;
        let w = weights.map_or(1.0, |w| w[i]);
        let term = (-(row[s as usize] - mean)).exp();
        total += w * term;
        if let Some(d) = d_out.as_deref_mut() {
            // ∂/∂y_r exp(−(y_s − ȳ)) = −exp(·) (δ_rs − 1/p)
            let c = -scale * w * term;
            let mut dr = d.row_mut(i);
            for r in 0..p {
                dr[r] = c * (((r == s as usize) as u8 as f64) - inv_p);
            }
        }
    }
    total
}

fn check_pairs(model: &ConditionalModel, pairs: &[TrainingPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let space = model.space();
    for pair in pairs {
        model.check_step(pair.n)?;
        space.validate(&pair.config)?;
        if pair.site.index() >= space.q() {
            return Err(Error::InvalidParameter(format!("site {} outside 1..={}", pair.site, space.q())));
        }
    }
    Ok(())
}

/// Pair indices grouped by the network that serves them, in pair order.
fn group_by_net(model: &ConditionalModel, pairs: &[TrainingPair]) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); model.nets.len()];
    for (i, pair) in pairs.iter().enumerate() {
        groups[model.net_index(pair.n)].push(i);
    }
    groups
}

fn encode_group(model: &ConditionalModel, pairs: &[TrainingPair], idx: &[usize]) -> (Array2<f64>, Vec<u8>) {
    let (q, p) = (model.schedule.q, model.schedule.p);
    let mut x = Array2::zeros((idx.len(), input_dim(q, p)));
    let mut symbols = Vec::with_capacity(idx.len());
    for (&i, mut out) in idx.iter().zip(x.rows_mut()) {
        let pair = &pairs[i];
        encode_row_into(pair.n, model.schedule.steps, pair.site, &pair.config, p, out.as_slice_mut().expect("standard layout"));
        symbols.push(pair.config[pair.site.index()]);
    }
    (x, symbols)
}

/// Mean of `exp(−⟨Φ(σ_u), NN(n, u, σ_{−u})⟩)` over the batch.
pub fn neurise_loss(model: &ConditionalModel, pairs: &[TrainingPair]) -> Result<f64> {
    check_pairs(model, pairs)?;
    let mut total = 0.0;
    for (k, idx) in group_by_net(model, pairs).iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let (x, symbols) = encode_group(model, pairs, idx);
        let y = model.nets[k].forward(x.view())?;
        total += screening_terms(&y, &symbols, None, 0.0, None);
    }
    Ok(total / pairs.len() as f64)
}

/// Gradient of one network's parameters, per network.
pub type ModelGradient = Vec<Vec<f64>>;

/// Gradient of [`neurise_loss`] plus `weight_decay · θ`.
pub fn loss_gradient(model: &ConditionalModel, pairs: &[TrainingPair], weight_decay: f64) -> Result<ModelGradient> {
    Ok(weighted_loss_and_gradient(model, pairs, None, weight_decay)?.1)
}

/// Loss and gradient with optional per-pair weights `w_i`, where the loss is
/// `(1/B) Σ w_i exp(−⟨Φ(σ_u), NN⟩)`.
pub fn weighted_loss_and_gradient(
    model: &ConditionalModel,
    pairs: &[TrainingPair],
    weights: Option<&[f64]>,
    weight_decay: f64,
) -> Result<(f64, ModelGradient)> {
    check_pairs(model, pairs)?;
    if let Some(w) = weights {
        if w.len() != pairs.len() {
            return Err(Error::DimensionMismatch("one weight per pair is required".into()));
        }
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    let mut grads: ModelGradient = model.nets.iter().map(|n| vec![0.0; n.params().len()]).collect();
    for (k, idx) in group_by_net(model, pairs).iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let (x, symbols) = encode_group(model, pairs, idx);
        let w: Option<Vec<f64>> = weights.map(|w| idx.iter().map(|&i| w[i]).collect());
        let net = &model.nets[k];
        let cache = net.forward_cached(x.view())?;
        let mut d_out = Array2::zeros(cache.output.raw_dim());
        total += screening_terms(&cache.output, &symbols, w.as_deref(), scale, Some(&mut d_out));
        net.backward(&cache, d_out.view(), &mut grads[k]);
    }
    if weight_decay != 0.0 {
        for (g, net) in grads.iter_mut().zip(&model.nets) {
            for (gi, th) in g.iter_mut().zip(net.params()) {
                *gi += weight_decay * th;
            }
        }
    }
    Ok((total * scale, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neurise::embedding::phi;
    use crate::reverse::CONDITIONAL_TOLERANCE;
    use rand::Rng;

    fn schedule(q: usize, p: usize, steps: usize) -> NoiseSchedule {
        NoiseSchedule::new(q, p, steps, 0.3).unwrap()
    }

    fn random_pairs(rng: &mut ChaCha8Rng, sch: &NoiseSchedule, n: usize) -> Vec<TrainingPair> {
        (0..n)
            .map(|_| TrainingPair {
                n: rng.random_range(0..sch.steps),
                site: Site::from_index(rng.random_range(0..sch.q)),
                config: (0..sch.q).map(|_| rng.random_range(0..sch.p) as u8).collect::<Vec<_>>().into(),
            })
            .collect()
    }

    #[test]
    fn zero_network_is_uniform_with_unit_loss() {
        let sch = schedule(4, 3, 8);
        let m = ConditionalModel::zeros(sch, Topology::PerStep, 5, 2).unwrap();
        let c = m.conditional(3, Site::from_index(1), &[0, 1, 2, 0]).unwrap();
        assert!(c.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = random_pairs(&mut rng, &sch, 10);
        assert_eq!(neurise_loss(&m, &pairs).unwrap(), 1.0);
        assert!(neurise_loss(&m, &[]).is_err());
    }

    #[test]
    fn network_count_follows_topology() {
        let sch = schedule(3, 2, 6);
        assert_eq!(ConditionalModel::zeros(sch, Topology::Global, 4, 1).unwrap().nets().len(), 1);
        assert_eq!(ConditionalModel::zeros(sch, Topology::PerStep, 4, 1).unwrap().nets().len(), 6);
        let net = Mlp::zeros(ConditionalModel::shape_for(&sch, 4, 1)).unwrap();
        assert!(ConditionalModel::new(sch, Topology::PerStep, vec![net]).is_err());
    }

    /// Scalar recomputation: forward each pair alone and apply the loss formula.
    #[test]
    fn loss_matches_scalar_recomputation() {
        let sch = schedule(3, 3, 4);
        let m = ConditionalModel::init(sch, Topology::Global, 3, 1, 9).unwrap();
        let pairs = vec![
            TrainingPair { n: 1, site: Site::from_index(0), config: vec![2, 0, 1].into() },
            TrainingPair { n: 3, site: Site::from_index(2), config: vec![1, 1, 0].into() },
        ];
        let mut expect = 0.0;
        for pair in &pairs {
            let context: Vec<u8> = pair
                .config
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != pair.site.index())
                .map(|(_, &s)| s)
                .collect();
            let x = crate::neurise::embedding::encode_input(&sch, pair.n, pair.site, &context).unwrap();
            let y = m.nets()[0].forward_one(&x).unwrap();
            let f = phi(pair.config[pair.site.index()] as usize, 3);
            let dot: f64 = f.iter().zip(&y).map(|(a, b)| a * b).sum();
            expect += (-dot).exp() / 2.0;
        }
        assert!((neurise_loss(&m, &pairs).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn loss_decreases_along_phi_direction() {
        let sch = schedule(2, 3, 2);
        let mut m = ConditionalModel::zeros(sch, Topology::Global, 3, 1).unwrap();
        let pairs = vec![TrainingPair { n: 0, site: Site::from_index(0), config: vec![1, 0].into() }];
        let bias = m.nets()[0].shape().groups().last().unwrap().range();
        let mut last = neurise_loss(&m, &pairs).unwrap();
        for step in 1..6 {
            let params = m.nets_mut()[0].params_mut();
            for (k, v) in params[bias.clone()].iter_mut().enumerate() {
                *v = step as f64 * phi(1, 3)[k];
            }
            let now = neurise_loss(&m, &pairs).unwrap();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn conditional_ratio_is_softmax_algebra() {
        let sch = schedule(4, 4, 4);
        let m = ConditionalModel::init(sch, Topology::Global, 6, 2, 3).unwrap();
        let config = [3u8, 0, 2, 1];
        let site = Site::from_index(2);
        let c = m.conditional(2, site, &config).unwrap();
        let y = m.outputs(2, site, &config).unwrap();
        let y = y.row(0);
        for r in 0..4 {
            for s in 0..4 {
                let dr: f64 = phi(r, 4).iter().zip(y.iter()).map(|(a, b)| a * b).sum();
                let ds: f64 = phi(s, 4).iter().zip(y.iter()).map(|(a, b)| a * b).sum();
                assert!(((dr - ds).exp() - c[r] / c[s]).abs() < 1e-12 * (c[r] / c[s]).max(1.0));
            }
        }
    }

    #[test]
    fn conditionals_are_distributions_for_wild_parameters() {
        let sch = schedule(3, 3, 3);
        let mut m = ConditionalModel::init(sch, Topology::Global, 4, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        m.nets_mut()[0].params_mut().iter_mut().for_each(|v| *v = rng.random_range(-30.0..30.0));
        for pair in random_pairs(&mut rng, &sch, 50) {
            let c = m.conditional(pair.n, pair.site, &pair.config).unwrap();
            assert!((c.iter().sum::<f64>() - 1.0).abs() < CONDITIONAL_TOLERANCE);
        }
        m.nets_mut()[0].params_mut()[0] = f64::NAN;
        assert!(m.conditional(0, Site::from_index(0), &[0, 0, 0]).is_err());
    }

    #[test]
    fn decay_gradient_alone() {
        let sch = schedule(3, 2, 3);
        let m = ConditionalModel::init(sch, Topology::PerStep, 4, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs = random_pairs(&mut rng, &sch, 8);
        let zeros = vec![0.0; pairs.len()];
        let (loss, g) = weighted_loss_and_gradient(&m, &pairs, Some(&zeros), 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().flatten().all(|v| *v == 0.0));
        let (_, g) = weighted_loss_and_gradient(&m, &pairs, Some(&zeros), 0.25).unwrap();
        for (gk, net) in g.iter().zip(m.nets()) {
            for (a, b) in gk.iter().zip(net.params()) {
                assert_eq!(*a, 0.25 * b);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for topology in [Topology::Global, Topology::PerStep] {
            let sch = schedule(3, 3, 3);
            let m = ConditionalModel::init(sch, topology, 5, 2, 8).unwrap();
            let pairs = random_pairs(&mut rng, &sch, 12);
            let g = loss_gradient(&m, &pairs, 1e-3).unwrap();
            let h = 1e-5;
            for k in 0..m.nets().len() {
                for i in 0..m.nets()[k].params().len() {
                    let mut plus = m.clone();
                    plus.nets_mut()[k].params_mut()[i] += h;
                    let mut minus = m.clone();
                    minus.nets_mut()[k].params_mut()[i] -= h;
                    let decay = 0.5e-3 * (plus.nets()[k].params()[i].powi(2) - minus.nets()[k].params()[i].powi(2));
                    let fd = (neurise_loss(&plus, &pairs).unwrap() - neurise_loss(&minus, &pairs).unwrap() + decay)
                        / (2.0 * h);
                    assert!((fd - g[k][i]).abs() < 1e-7 * (1.0 + fd.abs()), "{topology:?} net {k} param {i}");
                }
            }
        }
    }
}
