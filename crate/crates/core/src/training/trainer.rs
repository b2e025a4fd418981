use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_training_checkpoint, TrainingState};
use super::loss::{evaluate_terms, Model, Problem};
use super::{grad_norm_update, Adam, LossBreakdown, ModelKind, Term, TrainConfig};
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 15] = [
    "iter",
    "loss_total",
    "loss_data",
    "loss_inlet",
    "loss_wall",
    "loss_outlet",
    "loss_phy",
    "lambda_data",
    "lambda_inlet",
    "lambda_wall",
    "lambda_outlet",
    "lambda_phy",
    "lr",
    "val_metric",
    "wall_clock_s",
];

/// Growth of the total loss over its first value that counts as divergence.
const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub val_metric: f64,
    pub wall_clock_s: f64,
}

impl MetricsRow {
    /// One CSV line; floats use the shortest round-trip form.
    pub fn csv_line(&self) -> String {
        let mut cells = vec![self.iter.to_string(), format!("{:?}", self.loss.total)];
        cells.extend(self.loss.values.iter().map(|v| format!("{v:?}")));
        cells.extend(self.loss.lambdas.iter().map(|v| format!("{v:?}")));
        cells.push(format!("{:?}", self.lr));
        cells.push(format!("{:?}", self.val_metric));
        cells.push(format!("{:.3}", self.wall_clock_s));
        cells.join(",")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Parameters with the best validation metric.
    pub model: M,
    pub metrics: Vec<MetricsRow>,
    /// Optimizer steps taken.
    pub iterations: usize,
    /// Iteration at which the target loss was reached, if it was.
    pub stop_iter: Option<usize>,
    pub best_val: f64,
    /// Smallest unweighted batch loss seen.
    pub min_raw_loss: f64,
    pub train_seconds: f64,
    /// Wall-clock of each phase (two for warm-up runs).
    pub phase_seconds: Vec<f64>,
    pub state: TrainingState,
}

/// Where a run writes its artifacts; both are optional.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

struct MetricsSink {
    out: Option<BufWriter<File>>,
}

impl MetricsSink {
    fn open(path: Option<&Path>, append: bool) -> Result<MetricsSink> {
        let out = match path {
            None => None,
            Some(p) => {
                let file = if append {
                    std::fs::OpenOptions::new().append(true).create(true).open(p)?
                } else {
                    let mut f = File::create(p)?;
                    writeln!(f, "{}", METRICS_HEADER.join(","))?;
                    f
                };
                Some(BufWriter::new(file))
            }
        };
        Ok(MetricsSink { out })
    }

    fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            writeln!(w, "{}", row.csv_line())?;
            w.flush()?;
        }
        Ok(())
    }
}

/// Restore point for the divergence guard.
#[derive(Clone)]
struct Snapshot {
    t: usize,
    params: Vec<f64>,
    adam: Adam,
    lambdas: [f64; 5],
    rng: ChaCha8Rng,
    min_raw: f64,
}

struct Phase<'a> {
    active: [bool; 5],
    iterations: usize,
    offset: usize,
    rng_stream: u64,
    append: bool,
    outputs: &'a RunOutputs,
}

fn sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, k).into_vec()
    }
}

fn validation_metric<M: Model>(model: &M, problem: &Problem, active: &[bool; 5]) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut any = false;
    for term in Term::ALL {
        let data = &problem.val[term.index()];
        if !active[term.index()] || data.is_empty() {
            continue;
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        total += evaluate_terms(model, data, &idx, term, problem.coefficients(), false)?.loss;
        any = true;
    }
    Ok(any.then_some(total))
}

fn run_phase<M: Model>(mut model: M, problem: &Problem, config: &TrainConfig, phase: Phase) -> Result<TrainOutcome<M>> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(phase.rng_stream);
    let mut params = model.params();
    let mut adam = Adam::new(config.adam_config(), params.len());
    let mut lambdas = [1.0; 5];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut metrics = Vec::new();
    let mut sink = MetricsSink::open(phase.outputs.metrics.as_deref(), phase.append)?;
    let mut first_total: Option<f64> = None;
    let mut min_raw = f64::INFINITY;
    let mut halved = false;
    let mut stop_iter = None;
    let mut snapshot: Option<Snapshot> = None;
    let coefficients = problem.coefficients();
    let active = phase.active;

    let mut t = 0;
    loop {
        let last = t == phase.iterations;
        if t % config.checkpoint_every == 0 && !last {
            snapshot = Some(Snapshot { t, params: params.clone(), adam: adam.clone(), lambdas, rng: rng.clone(), min_raw });
        }
        let mut values = [0.0; 5];
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; 5];
        for term in Term::ALL {
            if !active[term.index()] {
                continue;
            }
            let data = &problem.train[term.index()];
            let idx = sample(&mut rng, data.len(), config.batch_size);
            let eval = evaluate_terms(&model, data, &idx, term, coefficients, !last)?;
            values[term.index()] = eval.loss;
            grads[term.index()] = eval.grad;
        }

        let mut breakdown = LossBreakdown::new(values, lambdas, active);
        let diverged = !breakdown.total.is_finite()
            || first_total.is_some_and(|f| breakdown.total > DIVERGENCE_FACTOR * f.max(f64::MIN_POSITIVE));
        if diverged {
            let detail = format!(
                "total loss {} at iteration {} (terms {:?})",
                breakdown.total,
                t + phase.offset,
                breakdown.values
            );
            match (&snapshot, halved) {
                (Some(s), false) => {
                    log::warn!("{detail}; halving the learning rate and restarting from iteration {}", s.t + phase.offset);
                    halved = true;
                    t = s.t;
                    params = s.params.clone();
                    adam = s.adam.clone();
                    adam.lr_factor *= 0.5;
                    lambdas = s.lambdas;
                    rng = s.rng.clone();
                    min_raw = s.min_raw;
                    metrics.retain(|r: &MetricsRow| r.iter < t + phase.offset);
                    model.set_params(&params)?;
                    continue;
                }
                _ => return Err(Error::Diverged { iteration: t + phase.offset, detail }),
            }
        }
        first_total.get_or_insert(breakdown.total);
        let raw = breakdown.raw_total();
        min_raw = min_raw.min(raw);

        if config.techniques.grad_norm && !last && t % config.grad_norm.every == 0 {
            let terms: Vec<usize> = (0..5).filter(|&i| active[i]).collect();
            let norms: Vec<f64> = terms
                .iter()
                .map(|&i| grads[i].as_ref().map_or(0.0, |g| g.iter().map(|x| x * x).sum::<f64>().sqrt()))
                .collect();
            let old: Vec<f64> = terms.iter().map(|&i| lambdas[i]).collect();
            let new = grad_norm_update(&old, &norms, config.grad_norm.momentum)?;
            for (k, &i) in terms.iter().enumerate() {
                lambdas[i] = new[k];
            }
            breakdown = LossBreakdown::new(values, lambdas, active);
        }

        let reached = config.target_total_loss.is_some_and(|target| raw <= target);
        if t % config.log_every == 0 || last || reached {
            let val = validation_metric(&model, problem, &active)?.unwrap_or(raw);
            let row = MetricsRow {
                iter: t + phase.offset,
                loss: breakdown,
                lr: adam.learning_rate(),
                val_metric: val,
                wall_clock_s: start.elapsed().as_secs_f64(),
            };
            sink.write(&row)?;
            metrics.push(row);
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                best = Some((val, params.clone()));
                if let Some(path) = &phase.outputs.checkpoint {
                    let state = TrainingState { adam: adam.clone(), lambdas, iteration: t + phase.offset };
                    save_training_checkpoint(path, &model, &state)?;
                }
            }
        }
        if reached {
            stop_iter = Some(t + phase.offset);
            break;
        }
        if last {
            break;
        }

        let mut grad = vec![0.0; params.len()];
        for i in 0..5 {
            if let Some(g) = &grads[i] {
                let l = lambdas[i];
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += l * b);
            }
        }
        adam.step(&mut params, &grad)?;
        model.set_params(&params)?;
        t += 1;
    }

    let (best_val, best_params) = best.expect("at least one logged row");
    model.set_params(&best_params)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        metrics,
        iterations: t,
        stop_iter,
        best_val,
        min_raw_loss: min_raw,
        train_seconds: seconds,
        phase_seconds: vec![seconds],
        state: TrainingState { adam, lambdas, iteration: t + phase.offset },
    })
}

fn physics_and_data(kind: ModelKind) -> (bool, bool) {
    match kind {
        ModelKind::DeepNn | ModelKind::DeepONet => (false, true),
        ModelKind::Pinn | ModelKind::PiDeepONet => (true, false),
        ModelKind::WuPinn => (true, true),
    }
}

const TRAIN_STREAM: u64 = 100;
const WARMUP_STREAM: u64 = 101;

/// Trains `model` on `problem` for `config.iterations` optimizer steps (or
/// until the target loss is reached) and returns the parameters with the
/// best validation metric. Warm-up runs are delegated to [`warmup_train`].
pub fn train<M: Model>(model: M, problem: &Problem, config: &TrainConfig, outputs: &RunOutputs) -> Result<TrainOutcome<M>> {
    config.validate()?;
    if config.kind == ModelKind::WuPinn {
        return warmup_train(model, problem, config, outputs);
    }
    let (physics, data) = physics_and_data(config.kind);
    let active = problem.active_terms(physics, data)?;
    run_phase(
        model,
        problem,
        config,
        Phase { active, iterations: config.iterations, offset: 0, rng_stream: TRAIN_STREAM, append: false, outputs },
    )
}

/// DeepNN warm-up for `config.warmup_iterations`, then physics-informed
/// training from the warm-up's best parameters for the rest of the budget.
/// With no warm-up this is exactly a plain physics-informed run.
pub fn warmup_train<M: Model>(
    model: M,
    problem: &Problem,
    config: &TrainConfig,
    outputs: &RunOutputs,
) -> Result<TrainOutcome<M>> {
    config.validate()?;
    let full = problem.active_terms(true, config.warmup_iterations > 0)?;
    let mut phase2_config = config.clone();
    phase2_config.kind = ModelKind::Pinn;
    if config.warmup_iterations == 0 {
        return run_phase(
            model,
            problem,
            &phase2_config,
            Phase { active: full, iterations: config.iterations, offset: 0, rng_stream: TRAIN_STREAM, append: false, outputs },
        );
    }
    let mut warm = full;
    warm[Term::Phy.index()] = false;
    let mut phase1_config = config.clone();
    phase1_config.kind = ModelKind::DeepNn;
    phase1_config.target_total_loss = None;
    let first = run_phase(
        model,
        problem,
        &phase1_config,
        Phase {
            active: warm,
            iterations: config.warmup_iterations,
            offset: 0,
            rng_stream: WARMUP_STREAM,
            append: false,
            outputs,
        },
    )?;
    let second = run_phase(
        first.model,
        problem,
        &phase2_config,
        Phase {
            active: full,
            iterations: config.iterations - config.warmup_iterations,
            offset: config.warmup_iterations,
            rng_stream: TRAIN_STREAM,
            append: true,
            outputs,
        },
    )?;
    let mut metrics = first.metrics;
    metrics.extend(second.metrics);
    Ok(TrainOutcome {
        model: second.model,
        metrics,
        iterations: first.iterations + second.iterations,
        stop_iter: second.stop_iter,
        best_val: second.best_val,
        min_raw_loss: second.min_raw_loss,
        train_seconds: first.train_seconds + second.train_seconds,
        phase_seconds: vec![first.train_seconds, second.train_seconds],
        state: second.state,
    })
}

/// Continues training a baseline on a new problem until the unweighted
/// batch loss reaches `stop_at_loss` or the budget runs out. The baseline
/// must have the architecture `config` would build (`reference`).
pub fn transfer_train<M: Model>(
    baseline: M,
    reference: &M,
    problem: &Problem,
    config: &TrainConfig,
    stop_at_loss: f64,
    outputs: &RunOutputs,
) -> Result<TrainOutcome<M>> {
    if !baseline.same_architecture(reference) {
        return Err(Error::Checkpoint("baseline architecture differs from the target configuration".into()));
    }
    let mut config = config.clone();
    config.target_total_loss = Some(stop_at_loss);
    if config.kind == ModelKind::WuPinn {
        config.kind = ModelKind::Pinn;
    }
    train(baseline, problem, &config, outputs)
}
