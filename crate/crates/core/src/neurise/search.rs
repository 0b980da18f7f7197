//! Random hyperparameter search scored by held-out screening loss.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::ConditionalModel;
use super::train::{train_with_report, validation_loss, TrainConfig, BATCH_SIZES, DEPTHS, LEARNING_RATES, WEIGHT_DECAYS, WIDTHS};
use crate::dist::SampleSet;
use crate::error::{Error, Result};
use crate::forward::NoiseSchedule;
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    /// Fixed fields (epochs, topology, ...) shared by every trial.
    pub base: TrainConfig,
    /// Also draw `ε ∈ (0, 1)` and the sweep count.
    pub tune_noise: bool,
    pub max_sweeps: usize,
    pub validation_fraction: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            tune_noise: false,
            max_sweeps: 3,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    pub index: usize,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub validation_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: usize,
    pub trials: Vec<SearchTrial>,
    pub model: ConditionalModel,
}

impl SearchResult {
    pub fn best_trial(&self) -> &SearchTrial {
        &self.trials[self.best]
    }
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

fn pick<R: Rng, T: Copy>(rng: &mut R, options: &[T]) -> T {
    options[rng.random_range(0..options.len())]
}

/// Draws trial `index` of a search seeded with `seed`.
pub fn sample_trial(space: &SearchSpace, schedule: &NoiseSchedule, index: usize, seed: u64) -> Result<(TrainConfig, NoiseSchedule)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10, index as u64));
    let config = TrainConfig {
        depth: rng.random_range(DEPTHS),
        width: pick(&mut rng, &WIDTHS),
        learning_rate: log_uniform(&mut rng, LEARNING_RATES),
        weight_decay: log_uniform(&mut rng, WEIGHT_DECAYS),
        batch_size: pick(&mut rng, &BATCH_SIZES),
        seed: derive_seed(seed, 11, index as u64),
        ..space.base.clone()
    };
    let schedule = if space.tune_noise {
        let eps = rng.random_range(0.0..1.0);
        let sweeps = rng.random_range(1..=space.max_sweeps.max(1));
        NoiseSchedule::with_sweeps(schedule.q, schedule.p, sweeps, eps)?
    } else {
        *schedule
    };
    Ok((config, schedule))
}

pub fn random_search(samples: &SampleSet, schedule: &NoiseSchedule, budget: usize, seed: u64) -> Result<SearchResult> {
    random_search_in(samples, schedule, &SearchSpace::default(), budget, seed)
}

/// Trains `budget` sampled configurations on the head of `samples` and keeps
/// the one with the lowest screening loss on the held-out tail.
pub fn random_search_in(
    samples: &SampleSet,
    schedule: &NoiseSchedule,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
) -> Result<SearchResult> {
    if budget == 0 {
        return Err(Error::InvalidParameter("search budget must be at least 1".into()));
    }
    if samples.len() < 2 {
        return Err(Error::Empty("search needs at least two samples"));
    }
    let n_val = ((samples.len() as f64 * space.validation_fraction).round() as usize).clamp(1, samples.len() - 1);
    let (train_set, val_set) = samples.split_tail(n_val);
    let mut trials = Vec::with_capacity(budget);
    let mut best: Option<(usize, ConditionalModel)> = None;
    for index in 0..budget {
        let started = Instant::now();
        let (config, trial_schedule) = sample_trial(space, schedule, index, seed)?;
        let (model, _) = train_with_report(&train_set, &trial_schedule, &config)?;
        let loss = validation_loss(&model, &val_set, derive_seed(seed, 12, 0))?;
        trials.push(SearchTrial {
            index,
            config,
            schedule: trial_schedule,
            validation_loss: loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _)| loss < trials[*b].validation_loss) {
            best = Some((index, model));
        }
    }
    let (best, model) = best.expect("budget is positive");
    Ok(SearchResult { best, trials, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{exact_distribution, sample_exact, IsingModel};

    fn data() -> (SampleSet, NoiseSchedule) {
        let model = IsingModel::new(2, vec![crate::models::Edge { i: 0, j: 1, coupling: 0.7 }], vec![0.1, -0.2]).unwrap();
        let s = sample_exact(&exact_distribution(&model).unwrap(), 400, 0).unwrap();
        (s, NoiseSchedule::new(2, 2, 2, 0.0).unwrap())
    }

    fn small_space() -> SearchSpace {
        SearchSpace {
            base: TrainConfig { epochs: 1, ..TrainConfig::default() },
            ..SearchSpace::default()
        }
    }

    #[test]
    fn sampled_configs_are_in_range_and_seeded() {
        let (_, sch) = data();
        let space = SearchSpace { tune_noise: true, ..small_space() };
        for i in 0..50 {
            let (c, s) = sample_trial(&space, &sch, i, 3).unwrap();
            c.validate().unwrap();
            assert!(s.epsilon < 1.0 && s.steps % 2 == 0 && s.steps <= 6);
            assert_eq!(sample_trial(&space, &sch, i, 3).unwrap(), (c, s));
        }
    }

    #[test]
    fn budget_one_returns_the_sampled_config() {
        let (s, sch) = data();
        let r = random_search_in(&s, &sch, &small_space(), 1, 5).unwrap();
        assert_eq!(r.best, 0);
        assert_eq!(r.trials[0].config, sample_trial(&small_space(), &sch, 0, 5).unwrap().0);
        assert!(random_search_in(&s, &sch, &small_space(), 0, 5).is_err());
    }

    #[test]
    fn best_is_argmin_and_deterministic() {
        let (s, sch) = data();
        let a = random_search_in(&s, &sch, &small_space(), 4, 8).unwrap();
        let b = random_search_in(&s, &sch, &small_space(), 4, 8).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.model, b.model);
        let mut losses: Vec<f64> = a.trials.iter().map(|t| t.validation_loss).collect();
        assert!(losses.iter().all(|&l| l >= a.best_trial().validation_loss));
        losses.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!(a.best_trial().validation_loss <= losses[losses.len() / 2]);
    }
}
