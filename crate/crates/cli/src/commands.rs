use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hemoflow::eval::{
    ablation_run, default_split_scenarios, export_field, reference_field, split_study, v_tag, CoordinateExperiment,
    CoordinateModel, EvalEntry, EvalReport, ExportFormat, OperatorExperiment, OperatorField, OperatorInstance,
    SplitScenario,
};
use hemoflow::geometry::{
    attach_boundary_labels, extract_data_scenario, inject_noise, read_csv, sample_domain, split, validate_cloud,
    write_csv, DomainKind, Stratum, StratifiedPointCloud,
};
use hemoflow::nn::Network;
use hemoflow::operators::{DeepONet, SensorLayout};
use hemoflow::physics::PoiseuilleOracle;
use hemoflow::training::{load_training_checkpoint, transfer_train, RunOutputs, TrainConfig};

use crate::config::{techniques_row, DataScenario, ExperimentConfig};

/// Paths of one run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(output: &Path, run_id: &str) -> Result<RunDir> {
        let root = output.join(run_id);
        std::fs::create_dir_all(root.join("fields")).with_context(|| format!("creating {}", root.display()))?;
        Ok(RunDir { root })
    }

    pub fn echo(&self) -> PathBuf {
        self.root.join("config.echo")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.csv")
    }
    pub fn fields(&self) -> PathBuf {
        self.root.join("fields")
    }

    fn outputs(&self) -> RunOutputs {
        RunOutputs { metrics: Some(self.metrics()), checkpoint: Some(self.checkpoint()) }
    }
}

pub fn cloud_file(dir: &Path, v: f64) -> PathBuf {
    dir.join(format!("cloud_V{}.csv", v_tag(v)))
}

fn oracle(cfg: &ExperimentConfig, v: f64) -> Result<Option<PoiseuilleOracle>> {
    Ok(match cfg.domain.kind {
        DomainKind::StraightPipe => Some(PoiseuilleOracle::new(cfg.fluid(v)?, cfg.p_out)),
        DomainKind::AaaIdealized => None,
    })
}

/// The labelled cloud for inlet velocity `v`: read from the data directory
/// when one is configured, otherwise sampled from the seed. The data
/// scenario and noise are applied when the cloud has no data stratum yet.
pub fn build_cloud(cfg: &ExperimentConfig, v: f64, seed: u64) -> Result<StratifiedPointCloud> {
    let mut cloud = match &cfg.data_dir {
        Some(dir) => {
            let mut c = read_csv(&cloud_file(dir, v), Some(&cfg.domain))?;
            c.v_max = Some(v);
            c.oracle = oracle(cfg, v)?;
            c
        }
        None => {
            let mut c = sample_domain(&cfg.domain, cfg.counts, seed)?;
            attach_boundary_labels(&mut c, v, oracle(cfg, v)?)?;
            c
        }
    };
    if cloud.get(Stratum::Data).is_empty() {
        if let DataScenario::Some(s) = cfg.scenario {
            let data = extract_data_scenario(&cloud, s, cfg.tolerance, seed.wrapping_add(1))?;
            cloud.set(Stratum::Data, data);
        }
        if cfg.noise > 0.0 {
            cloud = inject_noise(&cloud, cfg.noise, v, seed.wrapping_add(3))?;
        }
    }
    Ok(cloud)
}

fn coordinate_experiment(cfg: &ExperimentConfig, v: f64, seed: u64) -> Result<CoordinateExperiment> {
    let cloud = build_cloud(cfg, v, seed)?;
    let [train, val, test] = split(&cloud, cfg.split, seed.wrapping_add(2))?;
    Ok(CoordinateExperiment { train, val, test, params: cfg.fluid(v)? })
}

fn operator_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<OperatorExperiment> {
    let instances = cfg
        .velocities
        .iter()
        .map(|&v| {
            let cloud = build_cloud(cfg, v, seed)?;
            Ok(OperatorInstance { v, clouds: split(&cloud, cfg.split, seed.wrapping_add(2))? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OperatorExperiment {
        instances,
        layout: SensorLayout::area_stratified(&cfg.domain, cfg.sensors_inlet, cfg.sensors_outlet)?,
        reference_v: cfg.reference_v,
    })
}

fn write_echo(dir: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::write(dir.echo(), cfg.echo())?;
    Ok(())
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.train.clone() }
}

pub fn generate(cfg: &ExperimentConfig, dir: &RunDir, seed: u64) -> Result<()> {
    write_echo(dir, cfg)?;
    let data = dir.root.join("data");
    std::fs::create_dir_all(&data)?;
    for &v in &cfg.velocities {
        let cloud = build_cloud(cfg, v, seed)?;
        let path = cloud_file(&data, v);
        write_csv(&cloud, &path)?;
        log::info!("wrote {} ({} points)", path.display(), cloud.len());
    }
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, dir: &RunDir, seed: u64) -> Result<()> {
    write_echo(dir, cfg)?;
    let config = train_config(cfg, seed);
    let mut report = EvalReport::default();
    if config.kind.is_operator() {
        let exp = operator_experiment(cfg, seed)?;
        let outcome = exp.train(&cfg.velocities, &config, &dir.outputs())?;
        for &v in &cfg.velocities {
            let e = exp.evaluate(&outcome.model, v, &config)?;
            report.push(EvalEntry::new(config.kind.name(), v, "test", &e, outcome.train_seconds, outcome.stop_iter))?;
        }
    } else {
        let v = cfg.velocities[0];
        let exp = coordinate_experiment(cfg, v, seed)?;
        let run = exp.run(&config, &dir.outputs(), config.kind.name())?;
        report.push(run.entry)?;
    }
    report.write_csv(&dir.report())?;
    Ok(())
}

/// Configuration and seed of an existing run directory.
pub fn load_run(run: &Path) -> Result<(ExperimentConfig, u64)> {
    let cfg = ExperimentConfig::load(&run.join("config.echo"))?;
    let seed = cfg.seeds[0];
    Ok((cfg, seed))
}

pub fn eval(run: &Path) -> Result<()> {
    let (cfg, seed) = load_run(run)?;
    let dir = RunDir { root: run.to_path_buf() };
    let config = train_config(&cfg, seed);
    let mut report = EvalReport::default();
    if config.kind.is_operator() {
        let (op, _) = load_training_checkpoint::<DeepONet>(&dir.checkpoint(), config.adam_config())?;
        let exp = operator_experiment(&cfg, seed)?;
        for &v in &cfg.velocities {
            let e = exp.evaluate(&op, v, &config)?;
            report.push(EvalEntry::new(config.kind.name(), v, "test", &e, 0.0, None))?;
        }
    } else {
        let (net, _) = load_training_checkpoint::<Network>(&dir.checkpoint(), config.adam_config())?;
        let v = cfg.velocities[0];
        let exp = coordinate_experiment(&cfg, v, seed)?;
        let e = exp.evaluate(&net, &config)?;
        report.push(EvalEntry::new(config.kind.name(), v, "test", &e, 0.0, None))?;
    }
    report.write_csv(&dir.report())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn write_summary(report: &EvalReport, path: &Path) -> Result<()> {
    let mut s = String::from("model,V,split,runs,vel_mean,vel_sd,pres_mean,pres_sd\n");
    for r in report.summary() {
        s.push_str(&format!(
            "{},{},{},{},{:?},{:?},{:?},{:?}\n",
            r.model, r.v_tag, r.split, r.runs, r.velocity.0, r.velocity.1, r.pressure.0, r.pressure.1
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn ablate(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    write_echo(dir, cfg)?;
    let rows = cfg.ablation_rows.iter().map(|r| techniques_row(r)).collect::<hemoflow::Result<Vec<_>>>()?;
    // the data set is fixed by the first seed so that rows differ only in the model
    let exp = coordinate_experiment(cfg, cfg.velocities[0], cfg.seeds[0])?;
    let reports = ablation_run(&exp, &cfg.train, &rows, &cfg.seeds)?;
    let mut all = EvalReport::default();
    for r in reports {
        all.entries.extend(r.entries);
    }
    all.write_csv(&dir.report())?;
    write_summary(&all, &dir.root.join("summary.csv"))?;
    Ok(())
}

fn parse_scenario(s: &str) -> Result<SplitScenario> {
    if let Some(d) = default_split_scenarios().into_iter().find(|d| d.name == s) {
        return Ok(d);
    }
    // custom form: train velocities / test velocities
    let (a, b) = s
        .split_once('/')
        .ok_or_else(|| anyhow!("experiment.scenarios: {s:?} is neither 8-0, 5-3, 3-5 nor '<train V> / <test V>'"))?;
    let vs = |t: &str| -> Result<Vec<f64>> {
        t.split_whitespace().map(|x| x.parse().map_err(|_| anyhow!("experiment.scenarios: bad velocity {x:?}"))).collect()
    };
    Ok(SplitScenario { name: s.replace(' ', "_"), train_v: vs(a)?, test_v: vs(b)? })
}

pub fn split_study_cmd(cfg: &ExperimentConfig, dir: &RunDir, seed: u64) -> Result<()> {
    write_echo(dir, cfg)?;
    let config = train_config(cfg, seed);
    if !config.kind.is_operator() {
        bail!("model.kind: split studies need deeponet or pi-deeponet");
    }
    let scenarios = cfg.scenarios.iter().map(|s| parse_scenario(s)).collect::<Result<Vec<_>>>()?;
    let exp = operator_experiment(cfg, seed)?;
    let report = split_study(&exp, &scenarios, &config)?;
    report.write_csv(&dir.report())?;
    Ok(())
}

/// Cold baseline at the baseline velocity, then for every target a cold
/// run and a warm start from the baseline that stops at the cold run's
/// lowest loss.
pub fn transfer(cfg: &ExperimentConfig, dir: &RunDir, seed: u64, baseline: Option<&Path>) -> Result<()> {
    write_echo(dir, cfg)?;
    let config = train_config(cfg, seed);
    if config.kind.is_operator() {
        bail!("model.kind: transfer learning is implemented for coordinate networks");
    }
    let base_exp = coordinate_experiment(cfg, cfg.transfer_baseline, seed)?;
    let reference = base_exp.build_model(&config)?;
    let base = match baseline {
        Some(path) => load_training_checkpoint::<Network>(path, config.adam_config())?.0,
        None => {
            let run = base_exp.run(&config, &dir.outputs(), "baseline")?;
            run.outcome.model
        }
    };
    let mut report = EvalReport::default();
    for &v in &cfg.transfer_targets {
        let exp = coordinate_experiment(cfg, v, seed)?;
        let cold = exp.run(&TrainConfig { target_total_loss: None, ..config.clone() }, &RunOutputs::default(), "cold")?;
        let warm = transfer_train(
            base.clone(),
            &reference,
            &exp.problem(&config),
            &config,
            cold.outcome.min_raw_loss,
            &RunOutputs::default(),
        )?;
        let e = exp.evaluate(&warm.model, &config)?;
        let last = cold.outcome.iterations;
        report.push(EvalEntry { stop_iter: Some(last), ..cold.entry })?;
        report.push(EvalEntry::new(
            &format!("transfer-from-V{}", v_tag(cfg.transfer_baseline)),
            v,
            "test",
            &e,
            warm.train_seconds,
            warm.stop_iter,
        ))?;
        log::info!(
            "V={}: cold {} iterations, warm start reached {:.3e} at {:?}",
            v_tag(v),
            last,
            cold.outcome.min_raw_loss,
            warm.stop_iter
        );
    }
    report.write_csv(&dir.report())?;
    Ok(())
}

pub fn export(run: &Path, format: Option<&str>) -> Result<PathBuf> {
    let (cfg, seed) = load_run(run)?;
    let dir = RunDir { root: run.to_path_buf() };
    let format: ExportFormat = format.unwrap_or(&cfg.export_format).parse()?;
    let config = train_config(&cfg, seed);
    let v = cfg.velocities[0];
    let ext = match format {
        ExportFormat::Csv => "csv",
        ExportFormat::VtkLegacy => "vtk",
    };
    let path = dir.fields().join(format!("field_V{}.{ext}", v_tag(v)));
    std::fs::create_dir_all(dir.fields())?;
    if config.kind.is_operator() {
        let (op, _) = load_training_checkpoint::<DeepONet>(&dir.checkpoint(), config.adam_config())?;
        let exp = operator_experiment(&cfg, seed)?;
        let cloud = &exp.instances[0].clouds[2];
        let truth = reference_field(cloud).ok();
        let points = truth.as_ref().map_or_else(|| cloud.collocation_pool(), |t| t.points.clone());
        let (s1, s2) = exp.sensors(v, &config)?;
        let model = OperatorField { op: &op, scales: exp.scales(&config)?, s1, s2 };
        export_field(&model, &points, truth.as_ref(), format, &path)?;
    } else {
        let (net, _) = load_training_checkpoint::<Network>(&dir.checkpoint(), config.adam_config())?;
        let exp = coordinate_experiment(&cfg, v, seed)?;
        let truth = reference_field(&exp.test).ok();
        let points = truth.as_ref().map_or_else(|| exp.test.collocation_pool(), |t| t.points.clone());
        let model = CoordinateModel { net: &net, scales: exp.scales(&config) };
        export_field(&model, &points, truth.as_ref(), format, &path)?;
    }
    Ok(path)
}

/// Validates an external cloud against the configured domain and stores it
/// as the data file for the first configured velocity.
pub fn ingest(cfg: &ExperimentConfig, dir: &RunDir, input: &Path) -> Result<PathBuf> {
    let cloud = read_csv(input, Some(&cfg.domain))?;
    let problems = validate_cloud(&cloud);
    if !problems.is_empty() {
        return Err(hemoflow::Error::Validation(problems).into());
    }
    write_echo(dir, cfg)?;
    let data = dir.root.join("data");
    std::fs::create_dir_all(&data)?;
    let path = cloud_file(&data, cfg.velocities[0]);
    write_csv(&cloud, &path)?;
    for s in Stratum::ALL {
        println!("{s}: {}", cloud.get(s).len());
    }
    Ok(path)
}
