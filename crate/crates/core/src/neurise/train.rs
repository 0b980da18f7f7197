//! Training loop.
//!
//! Every epoch re-noises the data rows, then each network takes AdamW steps
//! over shuffled minibatches of `(n, u, noised row)` pairs from the steps it
//! serves. Networks train independently, so per-step models train in
//! parallel with identical results for any thread count.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::AdamW;
use super::embedding::{encode_row_into, input_dim};
use super::mlp::Mlp;
use super::model::{screening_terms, ConditionalModel, Topology};
use crate::dist::SampleSet;
use crate::error::{Error, Result};
use crate::forward::{noise_samples, NoiseSchedule};
use crate::seed::derive_seed;
use crate::state::Site;

pub const WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const BATCH_SIZES: [usize; 4] = [64, 128, 256, 512];
pub const DEPTHS: std::ops::RangeInclusive<usize> = 1..=5;
pub const LEARNING_RATES: (f64, f64) = (1e-4, 5e-2);
pub const WEIGHT_DECAYS: (f64, f64) = (1e-8, 1e-3);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub depth: usize,
    pub width: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Raise the epoch count until every network gets at least this many updates.
    pub min_updates: usize,
    pub seed: u64,
    pub topology: Topology,
    /// Train on every site at every step instead of only `u(n)`.
    pub all_coordinates: bool,
    /// Tail fraction of the data held out; each network keeps its parameters
    /// from the epoch with the lowest held-out loss.
    pub validation_fraction: f64,
    /// Cosine learning-rate decay to zero over the run.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 64,
            learning_rate: 3e-3,
            weight_decay: 1e-6,
            batch_size: 128,
            epochs: 20,
            min_updates: 0,
            seed: 0,
            topology: Topology::Global,
            all_coordinates: false,
            validation_fraction: 0.0,
            cosine_decay: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidParameter(what));
        if !DEPTHS.contains(&self.depth) {
            return bad(format!("depth {} outside 1..=5", self.depth));
        }
        if !WIDTHS.contains(&self.width) {
            return bad(format!("width {} not one of {WIDTHS:?}", self.width));
        }
        if !BATCH_SIZES.contains(&self.batch_size) {
            return bad(format!("batch size {} not one of {BATCH_SIZES:?}", self.batch_size));
        }
        if !(LEARNING_RATES.0..=LEARNING_RATES.1).contains(&self.learning_rate) {
            return bad(format!("learning rate {} outside {LEARNING_RATES:?}", self.learning_rate));
        }
        if !(WEIGHT_DECAYS.0..=WEIGHT_DECAYS.1).contains(&self.weight_decay) {
            return bad(format!("weight decay {} outside {WEIGHT_DECAYS:?}", self.weight_decay));
        }
        if self.epochs == 0 && self.min_updates == 0 {
            return bad("no training updates requested".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation fraction {} outside [0, 1)", self.validation_fraction));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters each network kept.
    pub kept_epoch: Vec<usize>,
    pub train_rows: usize,
    pub validation_rows: usize,
    pub seconds: f64,
}

pub fn train(samples: &SampleSet, schedule: &NoiseSchedule, config: &TrainConfig) -> Result<ConditionalModel> {
    Ok(train_with_report(samples, schedule, config)?.0)
}

/// `(n, site index, row)` triple into the noised sets.
type Pair = (u32, u32, u32);

fn steps_of(topology: Topology, k: usize, steps: usize) -> std::ops::Range<usize> {
    match topology {
        Topology::Global => 0..steps,
        Topology::PerStep => k..k + 1,
    }
}

fn pairs_for(schedule: &NoiseSchedule, steps: std::ops::Range<usize>, rows: usize, all_sites: bool) -> Vec<Pair> {
    let mut out = Vec::new();
    for n in steps {
        let sites: Vec<usize> = if all_sites {
            (0..schedule.q).collect()
        } else {
            vec![schedule.site_at(n).index()]
        };
        for &u in &sites {
            out.extend((0..rows as u32).map(|i| (n as u32, u as u32, i)));
        }
    }
    out
}

fn encode_pairs(schedule: &NoiseSchedule, noised: &[SampleSet], pairs: &[Pair]) -> (Array2<f64>, Vec<u8>) {
    let (q, p) = (schedule.q, schedule.p);
    let mut x = Array2::zeros((pairs.len(), input_dim(q, p)));
    let mut symbols = Vec::with_capacity(pairs.len());
    for (&(n, u, i), mut out) in pairs.iter().zip(x.rows_mut()) {
        let row = noised[n as usize].row(i as usize);
        let site = Site::from_index(u as usize);
        encode_row_into(n as usize, schedule.steps, site, row, p, out.as_slice_mut().expect("standard layout"));
        symbols.push(row[u as usize]);
    }
    (x, symbols)
}

/// Mean screening loss of one network over `pairs`.
fn pairs_loss(net: &Mlp, schedule: &NoiseSchedule, noised: &[SampleSet], pairs: &[Pair]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    for chunk in pairs.chunks(1024) {
        let (x, symbols) = encode_pairs(schedule, noised, chunk);
        total += screening_terms(&net.forward(x.view())?, &symbols, None, 0.0, None);
    }
    Ok((total, pairs.len()))
}

struct NetState {
    opt: AdamW,
    rng: ChaCha8Rng,
    grad: Vec<f64>,
    best: Option<(f64, usize, Vec<f64>)>,
}

pub fn train_with_report(
    samples: &SampleSet,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(ConditionalModel, TrainReport)> {
    config.validate()?;
    if samples.space() != schedule.space() {
        return Err(Error::DimensionMismatch("samples do not match schedule".into()));
    }
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if schedule.steps == 0 {
        return Err(Error::InvalidParameter("schedule has no steps".into()));
    }
    let started = Instant::now();
    let n_val = if config.validation_fraction > 0.0 {
        if samples.len() < 2 {
            return Err(Error::Empty("validation split needs two rows"));
        }
        ((samples.len() as f64 * config.validation_fraction).round() as usize).clamp(1, samples.len() - 1)
    } else {
        0
    };
    let (train_set, val_set) = samples.split_tail(n_val);
    let steps = schedule.steps;
    let mut model = ConditionalModel::init(*schedule, config.topology, config.width, config.depth, config.seed)?;
    let k_nets = model.nets().len();
    let net_pairs: Vec<Vec<Pair>> = (0..k_nets)
        .map(|k| pairs_for(schedule, steps_of(config.topology, k, steps), train_set.len(), config.all_coordinates))
        .collect();
    let max_pairs = net_pairs.iter().map(Vec::len).max().unwrap_or(0);
    let updates_per_epoch = max_pairs.div_ceil(config.batch_size).max(1);
    let epochs = config.epochs.max(config.min_updates.div_ceil(updates_per_epoch));
    let total_updates = (epochs * updates_per_epoch) as f64;

    let mut states: Vec<NetState> = model
        .nets()
        .iter()
        .enumerate()
        .map(|(k, net)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1, 0));
            rng.set_stream(k as u64);
            NetState {
                opt: AdamW::new(net.params().len(), config.learning_rate, config.weight_decay),
                rng,
                grad: vec![0.0; net.params().len()],
                best: None,
            }
        })
        .collect();

    let validation = if n_val > 0 {
        let noised = noise_samples(&val_set, steps - 1, schedule, derive_seed(config.seed, 2, 0))?;
        let pairs: Vec<Vec<Pair>> = (0..k_nets)
            .map(|k| pairs_for(schedule, steps_of(config.topology, k, steps), val_set.len(), config.all_coordinates))
            .collect();
        Some((noised, pairs))
    } else {
        None
    };

    let mut records = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let noised = noise_samples(&train_set, steps - 1, schedule, derive_seed(config.seed, 3, epoch as u64))?;
        let results: Vec<(f64, usize)> = model
            .nets_mut()
            .par_iter_mut()
            .zip(states.par_iter_mut())
            .zip(net_pairs.par_iter())
            .map(|((net, state), pairs)| -> Result<(f64, usize)> {
                let mut order = pairs.clone();
                order.shuffle(&mut state.rng);
                let mut total = 0.0;
                for chunk in order.chunks(config.batch_size) {
                    if config.cosine_decay {
                        let progress = state.opt.steps_taken() as f64 / total_updates;
                        state.opt.learning_rate =
                            config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
                    }
                    let (x, symbols) = encode_pairs(schedule, &noised, chunk);
                    let cache = net.forward_cached(x.view())?;
                    let mut d_out = Array2::zeros(cache.output.raw_dim());
                    let loss = screening_terms(&cache.output, &symbols, None, 1.0 / chunk.len() as f64, Some(&mut d_out));
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
                    }
                    total += loss;
                    state.grad.fill(0.0);
                    net.backward(&cache, d_out.view(), &mut state.grad);
                    state.opt.step(net.params_mut(), &state.grad);
                }
                Ok((total, order.len()))
            })
            .collect::<Result<_>>()?;
        let (sum, count) = results.iter().fold((0.0, 0), |(s, c), (a, b)| (s + a, c + b));

        let validation_loss = match &validation {
            Some((noised, pairs)) => {
                let losses: Vec<(f64, usize)> = model
                    .nets()
                    .par_iter()
                    .zip(pairs.par_iter())
                    .map(|(net, p)| pairs_loss(net, schedule, noised, p))
                    .collect::<Result<_>>()?;
                for ((net, state), (loss, count)) in model.nets().iter().zip(&mut states).zip(&losses) {
                    let mean = loss / *count as f64;
                    if state.best.as_ref().is_none_or(|(b, _, _)| mean < *b) {
                        state.best = Some((mean, epoch, net.params().to_vec()));
                    }
                }
                let (s, c) = losses.iter().fold((0.0, 0), |(s, c), (a, b)| (s + a, c + b));
                Some(s / c as f64)
            }
            None => None,
        };
        records.push(EpochRecord {
            epoch,
            train_loss: sum / count as f64,
            validation_loss,
            updates: states[0].opt.steps_taken(),
        });
    }

    let mut kept_epoch = vec![epochs - 1; k_nets];
    for ((net, state), kept) in model.nets_mut().iter_mut().zip(states).zip(&mut kept_epoch) {
        if let Some((_, epoch, params)) = state.best {
            net.params_mut().copy_from_slice(&params);
            *kept = epoch;
        }
    }
    let report = TrainReport {
        epochs: records,
        kept_epoch,
        train_rows: train_set.len(),
        validation_rows: val_set.len(),
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Mean screening loss over `(n, u(n))` pairs of `samples` noised with `seed`.
pub fn validation_loss(model: &ConditionalModel, samples: &SampleSet, seed: u64) -> Result<f64> {
    let schedule = model.schedule();
    if samples.space() != schedule.space() {
        return Err(Error::DimensionMismatch("samples do not match model".into()));
    }
    if samples.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let noised = noise_samples(samples, schedule.steps - 1, schedule, seed)?;
    let steps = schedule.steps;
    let results: Vec<(f64, usize)> = model
        .nets()
        .par_iter()
        .enumerate()
        .map(|(k, net)| {
            let pairs = pairs_for(schedule, steps_of(model.topology(), k, steps), samples.len(), false);
            pairs_loss(net, schedule, &noised, &pairs)
        })
        .collect::<Result<_>>()?;
    let (s, c) = results.iter().fold((0.0, 0), |(s, c), (a, b)| (s + a, c + b));
    Ok(s / c as f64)
}
