use super::{evaluate_field, reference_field, v_tag, CoordinateModel, EvalEntry, EvalReport, FieldErrors, OperatorField};
use crate::error::{Error, Result};
use crate::geometry::{DomainSpec, Stratum, StratifiedPointCloud};
use crate::nn::Network;
use crate::operators::{build_triplets, instance_sensors, DeepONet, SensorLayout, SensorRows};
use crate::physics::{FluidParams, Frame, Scales};
use crate::training::{evaluate_terms, train, Problem, RunOutputs, Techniques, Term, TermData, TrainConfig, TrainOutcome};

fn frame(config: &TrainConfig) -> Frame {
    if config.techniques.nondimensional {
        Frame::Dimensionless
    } else {
        Frame::Dimensional
    }
}

fn geometry_of(cloud: &StratifiedPointCloud) -> Result<DomainSpec> {
    match (&cloud.domain, &cloud.oracle) {
        (Some(d), _) => Ok(*d),
        (None, Some(o)) => Ok(DomainSpec::straight_pipe(o.params.radius, o.params.length)),
        _ => Err(Error::usage("the cloud carries neither a domain nor an oracle")),
    }
}

fn model_box(domain: &DomainSpec, scales: &Scales) -> ([f64; 3], [f64; 3]) {
    let (lo, hi) = domain.bounding_box();
    (scales.point(&lo), scales.point(&hi))
}

/// True when no training point carries a label inside the domain, in which
/// case the pressure is only known up to a constant.
fn data_free(cloud: &StratifiedPointCloud) -> bool {
    let d = cloud.get(Stratum::Data);
    !(d.has_velocity() || d.has_pressure())
}

/// One flow case split into train, validation and test clouds.
#[derive(Debug, Clone)]
pub struct CoordinateExperiment {
    pub train: StratifiedPointCloud,
    pub val: StratifiedPointCloud,
    pub test: StratifiedPointCloud,
    pub params: FluidParams,
}

#[derive(Debug, Clone)]
pub struct CoordinateRun {
    pub outcome: TrainOutcome<Network>,
    pub errors: FieldErrors,
    pub entry: EvalEntry,
}

impl CoordinateExperiment {
    pub fn scales(&self, config: &TrainConfig) -> Scales {
        Scales::new(frame(config), &self.params)
    }

    pub fn problem(&self, config: &TrainConfig) -> Problem {
        Problem::from_clouds(&self.train, &self.val, self.scales(config))
    }

    /// Freshly initialized network for `config`.
    pub fn build_model(&self, config: &TrainConfig) -> Result<Network> {
        let domain = geometry_of(&self.train)?;
        let (lo, hi) = model_box(&domain, &self.scales(config));
        Network::new(config.network_spec(&lo, &hi))
    }

    /// Test-split errors of a trained network. The pressure shift is removed
    /// for physics-informed models trained without interior data.
    pub fn evaluate(&self, net: &Network, config: &TrainConfig) -> Result<FieldErrors> {
        let truth = reference_field(&self.test)?;
        let shift = config.kind.uses_physics() && data_free(&self.train);
        evaluate_field(&CoordinateModel { net, scales: self.scales(config) }, &truth, shift)
    }

    pub fn run(&self, config: &TrainConfig, outputs: &RunOutputs, name: &str) -> Result<CoordinateRun> {
        self.run_from(self.build_model(config)?, config, outputs, name)
    }

    /// Like [`CoordinateExperiment::run`] but starting from given parameters.
    pub fn run_from(&self, net: Network, config: &TrainConfig, outputs: &RunOutputs, name: &str) -> Result<CoordinateRun> {
        if config.kind.is_operator() {
            return Err(Error::config("coordinate experiments need a pinn, wu-pinn or deepnn model"));
        }
        let outcome = train(net, &self.problem(config), config, outputs)?;
        let errors = self.evaluate(&outcome.model, config)?;
        let entry = EvalEntry::new(name, self.params.v_max, "test", &errors, outcome.train_seconds, outcome.stop_iter);
        Ok(CoordinateRun { outcome, errors, entry })
    }
}

/// Trains one model per technique row and seed. Each row yields one report
/// whose model ids are `<label>@<seed>`; rows keep their order.
pub fn ablation_run(
    exp: &CoordinateExperiment,
    base: &TrainConfig,
    rows: &[Techniques],
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    rows.iter()
        .map(|t| {
            let mut report = EvalReport::default();
            for &seed in seeds {
                let config = TrainConfig { techniques: *t, seed, ..base.clone() };
                let run = exp.run(&config, &RunOutputs::default(), &format!("{}:{}@{seed}", config.kind, t.label()))?;
                report.push(run.entry)?;
            }
            Ok(report)
        })
        .collect()
}

/// One function instance of a parametric study: the inlet velocity and its
/// train, validation and test clouds.
#[derive(Debug, Clone)]
pub struct OperatorInstance {
    pub v: f64,
    pub clouds: [StratifiedPointCloud; 3],
}

#[derive(Debug, Clone)]
pub struct OperatorExperiment {
    pub instances: Vec<OperatorInstance>,
    pub layout: SensorLayout,
    /// Velocity whose reference scales define the shared model frame.
    pub reference_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitScenario {
    pub name: String,
    pub train_v: Vec<f64>,
    pub test_v: Vec<f64>,
}

/// The train/test partitions `8-0`, `5-3` and `3-5` of the eight inlet
/// velocities.
pub fn default_split_scenarios() -> Vec<SplitScenario> {
    let s = |name: &str, train: &[f64], test: &[f64]| SplitScenario {
        name: name.into(),
        train_v: train.to_vec(),
        test_v: test.to_vec(),
    };
    vec![
        s("8-0", &crate::physics::VELOCITIES, &[]),
        s("5-3", &[0.04, 0.06, 0.10, 0.12, 0.15], &[0.05, 0.08, 0.13]),
        s("3-5", &[0.15, 0.04, 0.13], &[0.05, 0.06, 0.08, 0.10, 0.12]),
    ]
}

impl OperatorExperiment {
    fn params(&self) -> Result<FluidParams> {
        let first = self.instances.first().ok_or_else(|| Error::usage("no operator instances"))?;
        let domain = geometry_of(&first.clouds[0])?;
        Ok(match &first.clouds[0].oracle {
            Some(o) => o.params.with_velocity(self.reference_v),
            None => FluidParams::new(crate::physics::RHO, crate::physics::MU, self.reference_v, domain.radius, domain.length)?,
        })
    }

    pub fn scales(&self, config: &TrainConfig) -> Result<Scales> {
        Ok(Scales::new(frame(config), &self.params()?))
    }

    fn instance(&self, v: f64) -> Result<&OperatorInstance> {
        self.instances
            .iter()
            .find(|i| i.v == v)
            .ok_or_else(|| Error::config(format!("no instance with V = {v}")))
    }

    pub fn problem(&self, train_v: &[f64], config: &TrainConfig) -> Result<Problem> {
        let scales = self.scales(config)?;
        let pick = |k: usize| -> Result<Vec<StratifiedPointCloud>> {
            train_v.iter().map(|&v| Ok(self.instance(v)?.clouds[k].clone())).collect()
        };
        let train_t = build_triplets(&pick(0)?, &self.layout, &scales)?;
        let val_t = build_triplets(&pick(1)?, &self.layout, &scales)?;
        Problem::from_triplets(&train_t, &val_t, scales)
    }

    pub fn build_model(&self, config: &TrainConfig) -> Result<DeepONet> {
        let first = self.instances.first().ok_or_else(|| Error::usage("no operator instances"))?;
        let domain = geometry_of(&first.clouds[0])?;
        let (lo, hi) = model_box(&domain, &self.scales(config)?);
        DeepONet::new(config.operator_spec(self.layout.inlet.len(), self.layout.outlet.len(), &lo, &hi))
    }

    pub fn train(&self, train_v: &[f64], config: &TrainConfig, outputs: &RunOutputs) -> Result<TrainOutcome<DeepONet>> {
        if !config.kind.is_operator() {
            return Err(Error::config("operator experiments need a deeponet or pi-deeponet model"));
        }
        train(self.build_model(config)?, &self.problem(train_v, config)?, config, outputs)
    }

    /// Sensor values of instance `v` in the model frame.
    pub fn sensors(&self, v: f64, config: &TrainConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        let cloud = &self.instance(v)?.clouds[2];
        let radius = geometry_of(cloud)?.radius;
        instance_sensors(cloud, &self.layout, radius, &self.scales(config)?)
    }

    /// Errors on the test cloud of instance `v`.
    pub fn evaluate(&self, op: &DeepONet, v: f64, config: &TrainConfig) -> Result<FieldErrors> {
        let (s1, s2) = self.sensors(v, config)?;
        let truth = reference_field(&self.instance(v)?.clouds[2])?;
        evaluate_field(&OperatorField { op, scales: self.scales(config)?, s1, s2 }, &truth, false)
    }
}

/// Mean squared residual (summed over the four equations) of an operator at
/// SI `points` for instance `v`, in the model frame.
pub fn residual_metric(
    exp: &OperatorExperiment,
    op: &DeepONet,
    v: f64,
    points: &[[f64; 3]],
    config: &TrainConfig,
) -> Result<f64> {
    let scales = exp.scales(config)?;
    let (s1, s2) = exp.sensors(v, config)?;
    let data = TermData {
        x: points.iter().flat_map(|p| scales.point(p)).collect(),
        instance: vec![0; points.len()],
        rows: Some(SensorRows::single(&s1, &s2)?),
        targets: Vec::new(),
        mask: Vec::new(),
    };
    let idx: Vec<usize> = (0..points.len()).collect();
    Ok(evaluate_terms(op, &data, &idx, Term::Phy, scales.coefficients, false)?.loss)
}

/// Trains one operator per scenario and reports the test-cloud errors of
/// every instance, marked `train` or `test` by whether it was seen. Every
/// scenario must train on the smallest and largest available velocity.
pub fn split_study(exp: &OperatorExperiment, scenarios: &[SplitScenario], config: &TrainConfig) -> Result<EvalReport> {
    let all: Vec<f64> = exp.instances.iter().map(|i| i.v).collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut problems = Vec::new();
    for s in scenarios {
        if !s.train_v.contains(&lo) || !s.train_v.contains(&hi) {
            problems.push(format!("scenario {} must train on both V = {} and V = {}", s.name, v_tag(lo), v_tag(hi)));
        }
        for v in s.train_v.iter().chain(&s.test_v) {
            if !all.contains(v) {
                problems.push(format!("scenario {} uses V = {} which has no dataset", s.name, v_tag(*v)));
            }
        }
        if s.train_v.iter().any(|v| s.test_v.contains(v)) {
            problems.push(format!("scenario {} lists a velocity as both train and test", s.name));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let mut report = EvalReport::default();
    for s in scenarios {
        let outcome = exp.train(&s.train_v, config, &RunOutputs::default())?;
        let model = format!("{}:{}", config.kind, s.name);
        for (split, vs) in [("train", &s.train_v), ("test", &s.test_v)] {
            for &v in vs {
                let errors = exp.evaluate(&outcome.model, v, config)?;
                report.push(EvalEntry::new(&model, v, split, &errors, outcome.train_seconds, outcome.stop_iter))?;
            }
        }
    }
    Ok(report)
}
