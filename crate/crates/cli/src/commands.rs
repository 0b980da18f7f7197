use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use condiff::dist::{empirical_from_samples, ExactDistribution};
use condiff::experiment::{aggregate, run_experiment, write_aggregate_csv, write_trials_csv, ExperimentSpec, Metric};
use condiff::forward::NoiseSchedule;
use condiff::io::{load_samples, save_samples};
use condiff::metrics::{correlation_matrix_error, cross_correlation, cross_correlation_exact, mmd, tv, Bandwidth};
use condiff::models::{exact_distribution_guarded, sample_exact, sample_glauber};
use condiff::neurise::checkpoint::{data_fingerprint, load_checkpoint, save_checkpoint, sha256_hex};
use condiff::neurise::search::{random_search_in, SearchSpace};
use condiff::neurise::train::train_with_report;
use condiff::reverse::{reverse_sample, ReverseInit};
use condiff::seed::derive_seed;
use condiff::theory::{degenerate_reverse_demo, verify_error_bounds, verify_init_error, BoundReport, Perturbation};
use condiff::{EnergyModel, GibbsModel, Guard, SampleSet};
use serde::Serialize;

use crate::config::{Config, ModelKind};
use crate::{CliError, Command};

// Sub-seeds of the run seed, one per purpose.
const SEED_MODEL: u64 = 1;
const SEED_DATA: u64 = 2;
const SEED_TRAIN: u64 = 3;
const SEED_SAMPLE: u64 = 4;
const SEED_EVAL: u64 = 5;
const SEED_VERIFY: u64 = 6;
const SEED_SWEEP: u64 = 7;

/// What a command did, written as `<command>.json` beside its outputs.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub config: Config,
    pub metrics: BTreeMap<String, f64>,
    pub timings: BTreeMap<String, f64>,
    pub checkpoint: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunRecord {
    fn new(command: &str, config: &Config) -> Self {
        Self {
            command: command.into(),
            config: config.clone(),
            metrics: BTreeMap::new(),
            timings: BTreeMap::new(),
            checkpoint: None,
            outputs: Vec::new(),
        }
    }

    fn finish(mut self, out: &Path) -> Result<(), CliError> {
        let name = self.command.clone();
        let config_path = out.join(format!("{name}.config.toml"));
        write_text(&config_path, &self.config.to_toml())?;
        self.outputs.push(config_path);
        let json = serde_json::to_string_pretty(&self).map_err(|e| CliError::Other(e.to_string()))?;
        write_text(&out.join(format!("{name}.json")), &json)?;
        println!("{json}");
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn guard(config: &Config) -> Guard {
    Guard { max_bits: config.guard_bits }
}

fn build_model(config: &Config) -> Result<GibbsModel, CliError> {
    match config.model.kind {
        ModelKind::File => {
            let path = config.model.path.as_ref().expect("validated");
            Ok(GibbsModel::load(path)?)
        }
        _ => {
            let seed = config.model.seed.unwrap_or_else(|| derive_seed(config.seed, SEED_MODEL, 0));
            Ok(config.model.spec()?.build(seed)?)
        }
    }
}

fn schedule_for(config: &Config, q: usize, p: usize) -> Result<NoiseSchedule, CliError> {
    Ok(NoiseSchedule::with_sweeps(q, p, config.schedule.sweeps, config.schedule.epsilon)?)
}

fn load(path: &Path, config: &Config) -> Result<SampleSet, CliError> {
    load_samples(path, config.data.p).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn dispatch(command: &Command, config: Config, out: &Path) -> Result<(), CliError> {
    match command {
        Command::GenData => gen_data(config, out),
        Command::Train { data } => train(config, out, data.clone().unwrap_or_else(|| out.join("train.txt"))),
        Command::Sample { checkpoint, n } => sample(
            config,
            out,
            checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.bin")),
            *n,
        ),
        Command::Eval { generated, reference, model, metrics } => {
            eval(config, out, generated, reference.as_deref(), model.as_deref(), metrics)
        }
        Command::Verify => verify(config, out),
        Command::Sweep { data, budget } => sweep(config, out, data.clone().unwrap_or_else(|| out.join("train.txt")), *budget),
        Command::Experiment { name } => experiment(config, out, name),
    }
}

fn gen_data(config: Config, out: &Path) -> Result<(), CliError> {
    let mut record = RunRecord::new("gen-data", &config);
    let start = Instant::now();
    let model = build_model(&config)?;
    let model_path = out.join("model.json");
    model.save(&model_path)?;
    let seed_train = derive_seed(config.seed, SEED_DATA, 0);
    let seed_test = derive_seed(config.seed, SEED_DATA, 1);
    let (n_train, n_test) = (config.data.n_train, config.data.n_test);
    let (train, test) = match exact_distribution_guarded(&model, guard(&config)) {
        Ok(mu) => (sample_exact(&mu, n_train, seed_train)?, sample_exact(&mu, n_test, seed_test)?),
        Err(e @ condiff::Error::StateSpaceTooLarge { .. }) if !config.data.allow_mcmc => return Err(e.into()),
        Err(condiff::Error::StateSpaceTooLarge { .. }) => {
            let (burn, thin) = (config.data.burn_in, config.data.thinning);
            (
                sample_glauber(&model, n_train, burn, thin, seed_train)?,
                sample_glauber(&model, n_test, burn, thin, seed_test)?,
            )
        }
        Err(e) => return Err(e.into()),
    };
    for (name, set) in [("train.txt", &train), ("test.txt", &test)] {
        let path = out.join(name);
        save_samples(set, &path)?;
        record.outputs.push(path);
    }
    record.outputs.insert(0, model_path);
    record.metrics.insert("q".into(), model.space().q() as f64);
    record.metrics.insert("p".into(), model.space().p() as f64);
    record.timings.insert("total".into(), start.elapsed().as_secs_f64());
    record.finish(out)
}

fn train(mut config: Config, out: &Path, data: PathBuf) -> Result<(), CliError> {
    config.train.seed = derive_seed(config.seed, SEED_TRAIN, 0);
    let mut record = RunRecord::new("train", &config);
    let samples = load(&data, &config)?;
    let schedule = schedule_for(&config, samples.q(), samples.p())?;
    let (model, report) = train_with_report(&samples, &schedule, &config.train)?;
    let checkpoint = out.join("checkpoint.bin");
    save_checkpoint(&model, Some(&config.train), Some(&data_fingerprint(&samples)), &checkpoint)?;
    let loss_path = out.join("loss.csv");
    let mut w = create(&loss_path)?;
    writeln!(w, "epoch,train_loss,validation_loss,updates")?;
    for e in &report.epochs {
        let val = e.validation_loss.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(w, "{},{:e},{},{}", e.epoch, e.train_loss, val, e.updates)?;
    }
    w.flush()?;
    if let Some(last) = report.epochs.last() {
        record.metrics.insert("final_train_loss".into(), last.train_loss);
        if let Some(v) = last.validation_loss {
            record.metrics.insert("final_validation_loss".into(), v);
        }
    }
    record.metrics.insert("train_rows".into(), report.train_rows as f64);
    record.timings.insert("train".into(), report.seconds);
    record.checkpoint = Some(checkpoint);
    record.outputs.push(loss_path);
    record.finish(out)
}

fn sample(config: Config, out: &Path, checkpoint: PathBuf, n: Option<usize>) -> Result<(), CliError> {
    let mut record = RunRecord::new("sample", &config);
    let bytes = std::fs::read(&checkpoint).map_err(|e| CliError::Io(format!("{}: {e}", checkpoint.display())))?;
    let hash = sha256_hex(&bytes);
    let (model, _) = load_checkpoint(&checkpoint)?;
    let n = n.unwrap_or(config.sample.n);
    let start = Instant::now();
    let mut generated = reverse_sample(
        &model,
        model.schedule(),
        n,
        ReverseInit::Uniform,
        derive_seed(config.seed, SEED_SAMPLE, 0),
    )?;
    generated.provenance = format!("{}\ncheckpoint sha256={hash}", generated.provenance);
    let path = out.join("samples.txt");
    save_samples(&generated, &path)?;
    record.timings.insert("sample".into(), start.elapsed().as_secs_f64());
    record.checkpoint = Some(checkpoint);
    record.outputs.push(path);
    record.finish(out)
}

fn eval(
    config: Config,
    out: &Path,
    generated: &Path,
    reference: Option<&Path>,
    model: Option<&Path>,
    metrics: &str,
) -> Result<(), CliError> {
    let mut record = RunRecord::new("eval", &config);
    let start = Instant::now();
    let metrics: Vec<Metric> = metrics
        .split(',')
        .map(|m| m.trim().parse::<Metric>())
        .collect::<Result<_, _>>()?;
    let gen = load(generated, &config)?;
    let emp = empirical_from_samples(&gen)?;
    // exact reference when a model is given and fits the guard
    let exact: Option<ExactDistribution> = match model {
        Some(path) => Some(exact_distribution_guarded(&GibbsModel::load(path)?, guard(&config))?),
        None => None,
    };
    let ref_samples = match (reference, &exact) {
        (Some(path), _) => Some(load(path, &config)?),
        (None, Some(mu)) if metrics.contains(&Metric::Mmd) => {
            Some(sample_exact(mu, gen.len(), derive_seed(config.seed, SEED_EVAL, 0))?)
        }
        (None, None) => return Err(CliError::Config("eval needs --reference or --model".into())),
        _ => None,
    };
    for metric in metrics {
        let value = match (metric, &exact, &ref_samples) {
            (Metric::Tv, Some(mu), _) => tv(&emp, mu)?,
            (Metric::Tv, None, Some(r)) => tv(&emp, &empirical_from_samples(r)?)?,
            (Metric::CrossCorrelation, Some(mu), _) => {
                correlation_matrix_error(&cross_correlation(&gen)?, &cross_correlation_exact(mu))?
            }
            (Metric::CrossCorrelation, None, Some(r)) => {
                correlation_matrix_error(&cross_correlation(&gen)?, &cross_correlation(r)?)?
            }
            (Metric::Mmd, _, Some(r)) => {
                let report = mmd(&gen, r, Bandwidth::Median)?;
                record.metrics.insert("mmd_n_reference".into(), report.n_b as f64);
                report.value
            }
            (Metric::TvLaw, ..) => {
                return Err(CliError::Config("tv-law needs a checkpoint; use the experiment command".into()))
            }
            _ => unreachable!("reference resolved above"),
        };
        record.metrics.insert(metric.name().into(), value);
    }
    record.timings.insert("eval".into(), start.elapsed().as_secs_f64());
    record.finish(out)
}

#[derive(Serialize)]
struct BoundEntry {
    magnitude: f64,
    seed: u64,
    report: BoundReport,
}

#[derive(Serialize)]
struct InitEntry {
    noise_samples: usize,
    seed: u64,
    report: BoundReport,
}

fn verify(config: Config, out: &Path) -> Result<(), CliError> {
    let mut record = RunRecord::new("verify", &config);
    let start = Instant::now();
    let model = build_model(&config)?;
    let space = model.space();
    let schedule = schedule_for(&config, space.q(), space.p())?;
    let g = guard(&config);
    let mut perts = Vec::new();
    for (i, &magnitude) in config.verify.magnitudes.iter().enumerate() {
        let draws = if magnitude == 0.0 { 1 } else { config.verify.draws };
        for k in 0..draws {
            let seed = derive_seed(config.seed, SEED_VERIFY, (i * config.verify.draws + k) as u64);
            perts.push(Perturbation { magnitude, seed, mode: config.verify.mode });
        }
    }
    let bounds: Vec<BoundEntry> = verify_error_bounds(&model, &schedule, &perts, g)?
        .into_iter()
        .zip(&perts)
        .map(|(report, p)| BoundEntry { magnitude: p.magnitude, seed: p.seed, report })
        .collect();
    let mut init = Vec::new();
    for &n in &config.verify.noise_samples {
        for s in 0..config.verify.noise_seeds as u64 {
            let seed = derive_seed(config.seed, SEED_VERIFY + 100, s);
            init.push(InitEntry { noise_samples: n, seed, report: verify_init_error(&model, &schedule, n, seed, g)? });
        }
    }
    let degenerate = degenerate_reverse_demo(&model, &schedule, &[0.25, 0.5], g)?;
    let held = bounds.iter().filter(|b| b.report.holds).count() + init.iter().filter(|b| b.report.holds).count();
    let total = bounds.len() + init.len();
    let path = out.join("bounds.json");
    let body = serde_json::json!({ "error_bound": bounds, "init_error": init, "degenerate": degenerate });
    write_text(&path, &serde_json::to_string_pretty(&body).map_err(|e| CliError::Other(e.to_string()))?)?;
    record.metrics.insert("bounds_held".into(), held as f64);
    record.metrics.insert("bounds_total".into(), total as f64);
    record.metrics.insert("degenerate_max_marginal_error".into(), degenerate.max_marginal_error);
    record.timings.insert("verify".into(), start.elapsed().as_secs_f64());
    record.outputs.push(path);
    record.finish(out)?;
    if held != total {
        return Err(CliError::Other(format!("bound violated in {} of {total} runs", total - held)));
    }
    Ok(())
}

fn sweep(config: Config, out: &Path, data: PathBuf, budget: Option<usize>) -> Result<(), CliError> {
    let mut record = RunRecord::new("sweep", &config);
    let samples = load(&data, &config)?;
    let schedule = schedule_for(&config, samples.q(), samples.p())?;
    let space = SearchSpace {
        base: config.train.clone(),
        tune_noise: config.sweep.tune_noise,
        max_sweeps: config.sweep.max_sweeps,
        validation_fraction: config.sweep.validation_fraction,
    };
    let budget = budget.unwrap_or(config.sweep.budget);
    let result = random_search_in(&samples, &schedule, &space, budget, derive_seed(config.seed, SEED_SWEEP, 0))?;
    let board = out.join("leaderboard.csv");
    let mut w = create(&board)?;
    writeln!(
        w,
        "trial,validation_loss,seconds,epsilon,steps,depth,width,learning_rate,weight_decay,batch_size,topology"
    )?;
    let mut order: Vec<_> = result.trials.iter().collect();
    order.sort_by(|a, b| a.validation_loss.total_cmp(&b.validation_loss));
    for t in order {
        let c = &t.config;
        writeln!(
            w,
            "{},{:e},{:.3},{},{},{},{},{:e},{:e},{},{:?}",
            t.index,
            t.validation_loss,
            t.seconds,
            t.schedule.epsilon,
            t.schedule.steps,
            c.depth,
            c.width,
            c.learning_rate,
            c.weight_decay,
            c.batch_size,
            c.topology
        )?;
    }
    w.flush()?;
    let best = result.best_trial();
    let best_path = out.join("best.json");
    let json = serde_json::json!({ "config": best.config, "schedule": best.schedule, "validation_loss": best.validation_loss });
    write_text(&best_path, &serde_json::to_string_pretty(&json).map_err(|e| CliError::Other(e.to_string()))?)?;
    let checkpoint = out.join("best.bin");
    save_checkpoint(&result.model, Some(&best.config), Some(&data_fingerprint(&samples)), &checkpoint)?;
    record.metrics.insert("best_validation_loss".into(), best.validation_loss);
    record.timings.insert("sweep".into(), result.trials.iter().map(|t| t.seconds).sum());
    record.checkpoint = Some(checkpoint);
    record.outputs.extend([board, best_path]);
    record.finish(out)
}

fn experiment(config: Config, out: &Path, name: &str) -> Result<(), CliError> {
    let mut record = RunRecord::new("experiment", &config);
    let mut spec = ExperimentSpec::named(name).map_err(|e| CliError::Config(e.to_string()))?;
    let o = &config.experiment;
    if let Some(grid) = &o.grid {
        spec.grid = grid.clone();
    }
    if let Some(v) = o.trials {
        spec.trials = v;
    }
    if let Some(v) = o.models {
        spec.models = v;
    }
    if let Some(v) = o.n_generated {
        spec.n_generated = v;
    }
    if let Some(v) = &o.metrics {
        spec.metrics = v.clone();
    }
    if let Some(v) = &o.variants {
        spec.variants = v.clone();
    }
    if o.use_model_section {
        spec.model = config.model.spec()?;
    }
    if o.use_train_section {
        spec.train = config.train.clone();
    }
    spec.base_seed = config.seed;
    spec.validate()?;
    let start = Instant::now();
    let records = run_experiment(&spec, guard(&config))?;
    let trials_path = out.join(format!("{name}.trials.csv"));
    let mut w = create(&trials_path)?;
    write_trials_csv(&records, &mut w)?;
    w.flush()?;
    let rows = aggregate(&records);
    let summary_path = out.join(format!("{name}.summary.csv"));
    let mut w = create(&summary_path)?;
    write_aggregate_csv(&rows, &mut w)?;
    w.flush()?;
    for r in &rows {
        record.metrics.insert(format!("{}/{}/N={}/median", r.variant, r.metric, r.n_train), r.median);
    }
    record.timings.insert("experiment".into(), start.elapsed().as_secs_f64());
    record.outputs.extend([trials_path, summary_path]);
    let spec_path = out.join(format!("{name}.spec.json"));
    write_text(&spec_path, &serde_json::to_string_pretty(&spec).map_err(|e| CliError::Other(e.to_string()))?)?;
    record.outputs.push(spec_path);
    record.finish(out)
}
