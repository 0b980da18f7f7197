//! Train-size sweeps: sample exact data, train, generate, score.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{empirical_from_samples, ExactDistribution, SampleSet};
use crate::error::{Error, Result};
use crate::forward::NoiseSchedule;
use crate::metrics::{correlation_matrix_error, cross_correlation, cross_correlation_exact, mmd, tv, tv_exact, Bandwidth};
use crate::models::{ea_ising, ea_potts, exact_distribution_guarded, sample_exact, EaParams, GibbsModel};
use crate::neurise::model::Topology;
use crate::neurise::train::{train, TrainConfig};
use crate::reverse::{reverse_pushforward_exact, reverse_sample, ReverseInit};
use crate::seed::derive_seed;
use crate::state::Guard;

/// `{10², 10^2.5, …, 10⁵}`, rounded.
pub fn default_grid() -> Vec<usize> {
    (4..=10).map(|k| 10f64.powf(k as f64 / 2.0).round() as usize).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    EaIsing { side: usize, coupling: f64, field: f64 },
    EaPotts { side: usize, p: usize, coupling: f64, field: f64 },
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<GibbsModel> {
        Ok(match *self {
            ModelSpec::EaIsing { side, coupling, field } => ea_ising(EaParams { side, coupling, field, seed })?.into(),
            ModelSpec::EaPotts { side, p, coupling, field } => ea_potts(side, p, coupling, field, seed)?.into(),
        })
    }

    pub fn q(&self) -> usize {
        match *self {
            ModelSpec::EaIsing { side, .. } | ModelSpec::EaPotts { side, .. } => side * side,
        }
    }

    pub fn p(&self) -> usize {
        match *self {
            ModelSpec::EaIsing { .. } => 2,
            ModelSpec::EaPotts { p, .. } => p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Generated samples against the exact law.
    Tv,
    /// Exact output law of the learned reverse chain against the exact law.
    TvLaw,
    CrossCorrelation,
    /// Against a fresh exact sample of the same size as the generated set.
    Mmd,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Tv => "tv",
            Metric::TvLaw => "tv-law",
            Metric::CrossCorrelation => "cross-correlation",
            Metric::Mmd => "mmd",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tv" => Metric::Tv,
            "tv-law" => Metric::TvLaw,
            "cross-correlation" | "cc" => Metric::CrossCorrelation,
            "mmd" => Metric::Mmd,
            _ => return Err(Error::InvalidParameter(format!("unknown metric {s:?}"))),
        })
    }
}

/// One arm of an experiment: a noise schedule and a network topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    pub epsilon: f64,
    pub sweeps: usize,
    pub topology: Topology,
}

impl Variant {
    pub fn harsh(topology: Topology) -> Self {
        Self { label: "harsh".into(), epsilon: 0.0, sweeps: 1, topology }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelSpec,
    pub variants: Vec<Variant>,
    pub grid: Vec<usize>,
    pub models: usize,
    pub trials: usize,
    pub n_generated: usize,
    pub base_seed: u64,
    pub metrics: Vec<Metric>,
    pub train: TrainConfig,
}

/// Training settings used by the named pipelines.
pub fn pipeline_train_config() -> TrainConfig {
    TrainConfig {
        depth: 2,
        width: 64,
        learning_rate: 3e-3,
        weight_decay: 1e-6,
        batch_size: 128,
        epochs: 3,
        min_updates: 2000,
        topology: Topology::PerStep,
        ..TrainConfig::default()
    }
}

impl ExperimentSpec {
    /// The named pipelines with their default settings.
    pub fn named(name: &str) -> Result<Self> {
        let ising = |side| ModelSpec::EaIsing { side, coupling: 1.2, field: 0.05 };
        let base = |model, variants| ExperimentSpec {
            name: name.to_string(),
            model,
            variants,
            grid: default_grid(),
            models: 1,
            trials: 3,
            n_generated: 100_000,
            base_seed: 0,
            metrics: vec![Metric::Tv, Metric::CrossCorrelation],
            train: pipeline_train_config(),
        };
        Ok(match name {
            "ea-trend" => base(ising(4), vec![Variant::harsh(Topology::PerStep)]),
            "potts-trend" => {
                let mut s = base(
                    ModelSpec::EaPotts { side: 2, p: 3, coupling: 1.2, field: 0.05 },
                    vec![Variant::harsh(Topology::PerStep)],
                );
                s.metrics = vec![Metric::Tv, Metric::TvLaw, Metric::CrossCorrelation];
                s
            }
            "harsh-vs-soft" => base(
                ising(3),
                vec![
                    Variant::harsh(Topology::PerStep),
                    Variant { label: "soft".into(), epsilon: 0.5, sweeps: 2, topology: Topology::PerStep },
                ],
            ),
            "local-vs-global" => base(
                ising(3),
                vec![
                    Variant { label: "local".into(), ..Variant::harsh(Topology::PerStep) },
                    Variant { label: "global".into(), ..Variant::harsh(Topology::Global) },
                ],
            ),
            _ => return Err(Error::InvalidParameter(format!("unknown experiment {name:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.contains(&0) {
            return Err(Error::InvalidParameter("train sizes must be positive".into()));
        }
        if self.models == 0 || self.trials == 0 || self.n_generated == 0 {
            return Err(Error::InvalidParameter("models, trials and n_generated must be positive".into()));
        }
        if self.variants.is_empty() || self.metrics.is_empty() {
            return Err(Error::InvalidParameter("need at least one variant and one metric".into()));
        }
        for v in &self.variants {
            NoiseSchedule::with_sweeps(self.model.q(), self.model.p(), v.sweeps, v.epsilon)?;
        }
        self.train.validate()
    }

    /// Every (variant, model, trial, N) combination, in a fixed order.
    pub fn jobs(&self) -> Vec<Job> {
        let mut jobs = Vec::new();
        for variant in 0..self.variants.len() {
            for model_index in 0..self.models {
                for trial in 0..self.trials {
                    for &n_train in &self.grid {
                        jobs.push(Job { variant, model_index, trial, n_train });
                    }
                }
            }
        }
        jobs
    }
}

/// Model couplings come from `derive_seed(base, model, 0)`; trial `t` uses
/// `derive_seed(base, model, t + 1)`.
pub fn model_seed(base: u64, model_index: usize) -> u64 {
    derive_seed(base, model_index as u64, 0)
}

pub fn trial_seed(base: u64, model_index: usize, trial: usize) -> u64 {
    derive_seed(base, model_index as u64, trial as u64 + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Job {
    pub variant: usize,
    pub model_index: usize,
    pub trial: usize,
    pub n_train: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub variant: String,
    pub model: usize,
    pub trial: usize,
    pub n_train: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub wall_seconds: f64,
}

/// Runs one job; returns one record per metric.
pub fn run_job(spec: &ExperimentSpec, job: Job, guard: Guard) -> Result<Vec<TrialRecord>> {
    let start = Instant::now();
    let variant = &spec.variants[job.variant];
    let model = spec.model.build(model_seed(spec.base_seed, job.model_index))?;
    let mu = exact_distribution_guarded(&model, guard)?;
    let seed = trial_seed(spec.base_seed, job.model_index, job.trial);
    // the size enters the data seed so grid points draw independent data
    let data = sample_exact(&mu, job.n_train, derive_seed(seed, 1, job.n_train as u64))?;
    let schedule = NoiseSchedule::with_sweeps(spec.model.q(), spec.model.p(), variant.sweeps, variant.epsilon)?;
    let config = TrainConfig {
        seed: derive_seed(seed, 2, job.n_train as u64),
        topology: variant.topology,
        ..spec.train.clone()
    };
    let learned = train(&data, &schedule, &config)?;
    let generated = reverse_sample(
        &learned,
        &schedule,
        spec.n_generated,
        ReverseInit::Uniform,
        derive_seed(seed, 3, job.n_train as u64),
    )?;
    let mut values = Vec::with_capacity(spec.metrics.len());
    for &metric in &spec.metrics {
        let v = match metric {
            Metric::Tv => tv(&empirical_from_samples(&generated)?, &mu)?,
            Metric::TvLaw => {
                let uniform = ExactDistribution::uniform(schedule.space(), guard)?;
                tv_exact(&reverse_pushforward_exact(&learned, &schedule, &uniform)?, &mu)?
            }
            Metric::CrossCorrelation => correlation_matrix_error(&cross_correlation(&generated)?, &cross_correlation_exact(&mu))?,
            Metric::Mmd => {
                let reference = sample_exact(&mu, spec.n_generated, derive_seed(seed, 4, job.n_train as u64))?;
                mmd(&generated, &reference, Bandwidth::Median)?.value
            }
        };
        values.push((metric, v));
    }
    let wall = start.elapsed().as_secs_f64();
    Ok(values
        .into_iter()
        .map(|(metric, value)| TrialRecord {
            variant: variant.label.clone(),
            model: job.model_index,
            trial: job.trial,
            n_train: job.n_train,
            metric: metric.name().to_string(),
            value,
            seed,
            wall_seconds: wall,
        })
        .collect())
}

/// Runs every job in parallel. Records come back in job order.
pub fn run_experiment(spec: &ExperimentSpec, guard: Guard) -> Result<Vec<TrialRecord>> {
    spec.validate()?;
    let per_job: Vec<Vec<TrialRecord>> = spec
        .jobs()
        .into_par_iter()
        .map(|job| run_job(spec, job, guard))
        .collect::<Result<_>>()?;
    Ok(per_job.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub n_train: usize,
    pub metric: String,
    pub count: usize,
    pub median: f64,
    pub std: f64,
}

/// Median of a non-empty slice (mean of the middle pair for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Sample standard deviation; 0 for a single value.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Groups by (variant, N, metric), sorted, so the result does not depend on
/// record order.
pub fn aggregate(records: &[TrialRecord]) -> Vec<AggregateRow> {
    let mut groups: std::collections::BTreeMap<(String, usize, String), Vec<f64>> = Default::default();
    for r in records {
        groups
            .entry((r.variant.clone(), r.n_train, r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((variant, n_train, metric), values)| AggregateRow {
            variant,
            n_train,
            metric,
            count: values.len(),
            median: median(&values),
            std: std_dev(&values),
        })
        .collect()
}

pub fn write_trials_csv<W: Write>(records: &[TrialRecord], mut w: W) -> Result<()> {
    writeln!(w, "variant,model,trial,N_train,metric,value,seed,wall_seconds")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{:e},{},{:.3}",
            r.variant, r.model, r.trial, r.n_train, r.metric, r.value, r.seed, r.wall_seconds
        )?;
    }
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], mut w: W) -> Result<()> {
    writeln!(w, "variant,N_train,metric,count,median,std")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{:e},{:e}", r.variant, r.n_train, r.metric, r.count, r.median, r.std)?;
    }
    Ok(())
}

/// Medians of one (variant, metric) series in grid order.
pub fn median_series(rows: &[AggregateRow], variant: &str, metric: &str) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.variant == variant && r.metric == metric)
        .map(|r| (r.n_train, r.median))
        .collect();
    out.sort_by_key(|(n, _)| *n);
    out
}

/// Reads back a trials CSV written by [`write_trials_csv`].
pub fn read_trials_csv(text: &str) -> Result<Vec<TrialRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "variant,model,trial,N_train,metric,value,seed,wall_seconds")) => {}
        _ => {
            return Err(Error::Parse { line: 1, msg: "missing trials CSV header".into() });
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::Parse { line: i + 1, msg: format!("bad trials row {line:?}") };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            Ok(TrialRecord {
                variant: f[0].to_string(),
                model: f[1].parse().map_err(|_| bad())?,
                trial: f[2].parse().map_err(|_| bad())?,
                n_train: f[3].parse().map_err(|_| bad())?,
                metric: f[4].to_string(),
                value: f[5].parse().map_err(|_| bad())?,
                seed: f[6].parse().map_err(|_| bad())?,
                wall_seconds: f[7].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Train-size sample used by the pipelines, exposed for the CLI.
pub fn exact_training_data(model: &GibbsModel, n: usize, seed: u64, guard: Guard) -> Result<SampleSet> {
    sample_exact(&exact_distribution_guarded(model, guard)?, n, seed)
}
