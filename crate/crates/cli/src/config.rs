//! Flat `key = value` configuration with `[section]` headers.
//!
//! Every key has a default; the effective configuration is written back in
//! the same format so a run can be repeated from its echo.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use hemoflow::geometry::{Bulge, DomainKind, DomainSpec, Scenario, SplitFractions, StratumCounts};
use hemoflow::physics::{FluidParams, INLET_RADIUS, LENGTH, MU, RHO};
use hemoflow::training::{AdamConfig, GradNormConfig, ModelKind, Techniques, TrainConfig};

/// How the data stratum is drawn, or `None` for data-free runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DataScenario {
    None,
    Some(Scenario),
}

impl FromStr for DataScenario {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<DataScenario> {
        if s == "none" {
            return Ok(DataScenario::None);
        }
        let (name, arg) = s.split_once(':').ok_or_else(|| anyhow!("expected none or <kind>:<value>, got {s:?}"))?;
        let slices = || arg.parse::<usize>().map_err(|_| anyhow!("slice count {arg:?} is not an integer"));
        Ok(DataScenario::Some(match name {
            "random" => Scenario::Random { fraction: arg.parse().map_err(|_| anyhow!("fraction {arg:?} is not a number"))? },
            "cross-section" => Scenario::CrossSection { slices: slices()? },
            "longitudinal" => Scenario::Longitudinal { slices: slices()? },
            _ => bail!("unknown data scenario {name:?} (random, cross-section or longitudinal)"),
        }))
    }
}

impl std::fmt::Display for DataScenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataScenario::None => f.write_str("none"),
            DataScenario::Some(Scenario::Random { fraction }) => write!(f, "random:{fraction:?}"),
            DataScenario::Some(Scenario::CrossSection { slices }) => write!(f, "cross-section:{slices}"),
            DataScenario::Some(Scenario::Longitudinal { slices }) => write!(f, "longitudinal:{slices}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub domain: DomainSpec,
    pub rho: f64,
    pub mu: f64,
    pub velocities: Vec<f64>,
    pub p_out: f64,
    pub counts: StratumCounts,
    pub scenario: DataScenario,
    pub tolerance: Option<f64>,
    pub noise: f64,
    pub split: SplitFractions,
    /// Directory of previously generated or ingested cloud CSVs; clouds are
    /// regenerated from the seed when absent.
    pub data_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub sensors_inlet: usize,
    pub sensors_outlet: usize,
    pub reference_v: f64,
    pub seeds: Vec<u64>,
    pub ablation_rows: Vec<String>,
    pub scenarios: Vec<String>,
    pub transfer_baseline: f64,
    pub transfer_targets: Vec<f64>,
    pub export_format: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            domain: DomainSpec::straight_pipe(INLET_RADIUS, LENGTH),
            rho: RHO,
            mu: MU,
            velocities: vec![0.1],
            p_out: 0.0,
            counts: StratumCounts::new(2000, 8000, 2000, 40_000),
            scenario: DataScenario::None,
            tolerance: None,
            noise: 0.0,
            split: SplitFractions::DEFAULT,
            data_dir: None,
            train: TrainConfig::default(),
            sensors_inlet: 64,
            sensors_outlet: 16,
            reference_v: 0.1,
            seeds: vec![0],
            ablation_rows: vec!["all-on".into(), "all-off".into()],
            scenarios: vec!["5-3".into()],
            transfer_baseline: 0.1,
            transfer_targets: hemoflow::physics::VELOCITIES.iter().copied().filter(|&v| v != 0.1).collect(),
            export_format: "vtk".into(),
        }
    }
}

/// Parses `[section]` headers and `key = value` lines into `section.key`
/// entries. `#` starts a comment.
pub fn parse_entries(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = || format!("{}:{}", origin.display(), n + 1);
        if let Some(name) = line.strip_prefix('[') {
            section = name.strip_suffix(']').ok_or_else(|| anyhow!("{}: unterminated section header", at()))?.trim().into();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("{}: expected key = value", at()))?;
        let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            bail!("{}: {key} is set twice", at());
        }
    }
    Ok(out)
}

struct Reader {
    entries: BTreeMap<String, String>,
}

impl Reader {
    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}")),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) if v.is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|e| anyhow!("{key}: cannot parse {s:?}: {e}")))
                .collect(),
        }
    }

    fn optional<T: FromStr>(&mut self, key: &str, default: Option<T>) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) if v == "none" || v.is_empty() => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}")),
        }
    }
}

fn parse_kind(s: &str) -> Result<DomainKind, String> {
    match s {
        "straight-pipe" => Ok(DomainKind::StraightPipe),
        "aaa" => Ok(DomainKind::AaaIdealized),
        _ => Err(format!("unknown domain kind {s:?} (straight-pipe or aaa)")),
    }
}

fn kind_name(k: DomainKind) -> &'static str {
    match k {
        DomainKind::StraightPipe => "straight-pipe",
        DomainKind::AaaIdealized => "aaa",
    }
}

struct Kind(ModelKind);

impl FromStr for Kind {
    type Err = String;
    fn from_str(s: &str) -> Result<Kind, String> {
        s.parse().map(Kind).map_err(|e: hemoflow::Error| e.to_string())
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        ExperimentConfig::from_entries(parse_entries(&text, path)?)
    }

    pub fn from_entries(entries: BTreeMap<String, String>) -> Result<ExperimentConfig> {
        let d = ExperimentConfig::default();
        let mut r = Reader { entries };
        let kind: String = r.get("domain.kind", kind_name(d.domain.kind).to_string())?;
        let kind = parse_kind(&kind).map_err(|e| anyhow!("domain.kind: {e}"))?;
        let radius = r.get("domain.radius", d.domain.radius)?;
        let length = r.get("domain.length", d.domain.length)?;
        let mut domain = match kind {
            DomainKind::StraightPipe => DomainSpec::straight_pipe(radius, length),
            DomainKind::AaaIdealized => DomainSpec::aaa(radius, length),
        };
        let bulge = domain.bulge;
        domain = domain.with_bulge(Bulge {
            center_fraction: r.get("domain.bulge_center", bulge.center_fraction)?,
            max_radius_ratio: r.get("domain.bulge_ratio", bulge.max_radius_ratio)?,
            shape_width: r.get("domain.bulge_width", bulge.shape_width)?,
        });
        domain.kind = kind;
        domain.validate().map_err(|e| anyhow!("domain: {e}"))?;

        let t = &d.train;
        let mut techniques = Techniques::ALL_ON;
        for name in Techniques::NAMES {
            let on = r.get(&format!("techniques.{name}"), true)?;
            techniques.set(name, on)?;
        }
        let train = TrainConfig {
            kind: r.get("model.kind", Kind(t.kind))?.0,
            hidden_width: r.get("model.hidden_width", t.hidden_width)?,
            hidden_layers: r.get("model.hidden_layers", t.hidden_layers)?,
            fourier_features: r.get("model.fourier_features", t.fourier_features)?,
            fourier_sigma: r.get("model.fourier_sigma", t.fourier_sigma)?,
            q: r.get("model.q", t.q)?,
            branch_width: r.get("model.branch_width", t.branch_width)?,
            branch_layers: r.get("model.branch_layers", t.branch_layers)?,
            iterations: r.get("train.iterations", t.iterations)?,
            batch_size: r.get("train.batch_size", t.batch_size)?,
            warmup_iterations: r.get("train.warmup_iterations", t.warmup_iterations)?,
            seed: 0,
            target_total_loss: r.optional("train.target_total_loss", t.target_total_loss)?,
            log_every: r.get("train.log_every", t.log_every)?,
            checkpoint_every: r.get("train.checkpoint_every", t.checkpoint_every)?,
            techniques,
            grad_norm: GradNormConfig {
                momentum: r.get("train.grad_norm_momentum", t.grad_norm.momentum)?,
                every: r.get("train.grad_norm_every", t.grad_norm.every)?,
            },
            adam: AdamConfig {
                lr: r.get("train.lr", t.adam.lr)?,
                beta1: r.get("train.beta1", t.adam.beta1)?,
                beta2: r.get("train.beta2", t.adam.beta2)?,
                eps: r.get("train.eps", t.adam.eps)?,
                decay_rate: r.get("train.decay_rate", t.adam.decay_rate)?,
                decay_steps: r.get("train.decay_steps", t.adam.decay_steps)?,
                decay: true,
            },
        };
        train.validate().map_err(|e| anyhow!("train: {e}"))?;

        let split = r.list("data.split", vec![d.split.train, d.split.val, d.split.test])?;
        if split.len() != 3 {
            bail!("data.split: expected three fractions, got {}", split.len());
        }
        let cfg = ExperimentConfig {
            domain,
            rho: r.get("fluid.rho", d.rho)?,
            mu: r.get("fluid.mu", d.mu)?,
            velocities: r.list("fluid.velocities", d.velocities)?,
            p_out: r.get("fluid.p_out", d.p_out)?,
            counts: StratumCounts::new(
                r.get("sampling.inlet", d.counts.inlet)?,
                r.get("sampling.wall", d.counts.wall)?,
                r.get("sampling.outlet", d.counts.outlet)?,
                r.get("sampling.volume", d.counts.volume)?,
            ),
            scenario: r.get("data.scenario", d.scenario)?,
            tolerance: r.optional("data.tolerance", d.tolerance)?,
            noise: r.get("data.noise", d.noise)?,
            split: SplitFractions::new(split[0], split[1], split[2]).map_err(|e| anyhow!("data.split: {e}"))?,
            data_dir: r.optional("data.dir", d.data_dir)?,
            train,
            sensors_inlet: r.get("model.sensors_inlet", d.sensors_inlet)?,
            sensors_outlet: r.get("model.sensors_outlet", d.sensors_outlet)?,
            reference_v: r.get("model.reference_v", d.reference_v)?,
            seeds: r.list("experiment.seeds", d.seeds)?,
            ablation_rows: r
                .entries
                .remove("experiment.ablation_rows")
                .map(|v| v.split(';').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
                .unwrap_or(d.ablation_rows),
            scenarios: r.list("experiment.scenarios", d.scenarios)?,
            transfer_baseline: r.get("experiment.transfer_baseline", d.transfer_baseline)?,
            transfer_targets: r.list("experiment.transfer_targets", d.transfer_targets)?,
            export_format: r.get("experiment.export_format", d.export_format)?,
        };
        if let Some(key) = r.entries.keys().next() {
            bail!("{key}: unknown key");
        }
        if cfg.velocities.is_empty() {
            bail!("fluid.velocities: at least one velocity is required");
        }
        if cfg.seeds.is_empty() {
            bail!("experiment.seeds: at least one seed is required");
        }
        if !(0.0..=1.0).contains(&cfg.noise) {
            bail!("data.noise: level {} is outside [0, 1]", cfg.noise);
        }
        for row in &cfg.ablation_rows {
            techniques_row(row).map_err(|e| anyhow!("experiment.ablation_rows: {e}"))?;
        }
        cfg.fluid(cfg.velocities[0]).map_err(|e| anyhow!("fluid: {e}"))?;
        Ok(cfg)
    }

    pub fn fluid(&self, v: f64) -> hemoflow::Result<FluidParams> {
        FluidParams::new(self.rho, self.mu, v, self.domain.radius, self.domain.length)
    }

    /// The effective configuration in the input format.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let t = &self.train;
        let _ = writeln!(s, "[domain]\nkind = {}\nradius = {:?}\nlength = {:?}", kind_name(self.domain.kind), self.domain.radius, self.domain.length);
        let b = self.domain.bulge;
        let _ = writeln!(s, "bulge_center = {:?}\nbulge_ratio = {:?}\nbulge_width = {:?}", b.center_fraction, b.max_radius_ratio, b.shape_width);
        let _ = writeln!(s, "\n[fluid]\nrho = {:?}\nmu = {:?}\nvelocities = {}\np_out = {:?}", self.rho, self.mu, list(&self.velocities), self.p_out);
        let c = &self.counts;
        let _ = writeln!(s, "\n[sampling]\ninlet = {}\nwall = {}\noutlet = {}\nvolume = {}", c.inlet, c.wall, c.outlet, c.volume);
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:?}"));
        let _ = writeln!(
            s,
            "\n[data]\nscenario = {}\ntolerance = {}\nnoise = {:?}\nsplit = {}\ndir = {}",
            self.scenario,
            opt(self.tolerance),
            self.noise,
            list(&[self.split.train, self.split.val, self.split.test]),
            self.data_dir.as_ref().map_or("none".into(), |p| p.display().to_string())
        );
        let _ = writeln!(
            s,
            "\n[model]\nkind = {}\nhidden_width = {}\nhidden_layers = {}\nfourier_features = {}\nfourier_sigma = {:?}\nq = {}\nbranch_width = {}\nbranch_layers = {}\nsensors_inlet = {}\nsensors_outlet = {}\nreference_v = {:?}",
            t.kind, t.hidden_width, t.hidden_layers, t.fourier_features, t.fourier_sigma, t.q, t.branch_width, t.branch_layers,
            self.sensors_inlet, self.sensors_outlet, self.reference_v
        );
        let a = &t.adam;
        let _ = writeln!(
            s,
            "\n[train]\niterations = {}\nbatch_size = {}\nwarmup_iterations = {}\ntarget_total_loss = {}\nlog_every = {}\ncheckpoint_every = {}\nlr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\ndecay_rate = {:?}\ndecay_steps = {}\ngrad_norm_momentum = {:?}\ngrad_norm_every = {}",
            t.iterations, t.batch_size, t.warmup_iterations, opt(t.target_total_loss), t.log_every, t.checkpoint_every,
            a.lr, a.beta1, a.beta2, a.eps, a.decay_rate, a.decay_steps, t.grad_norm.momentum, t.grad_norm.every
        );
        let _ = writeln!(s, "\n[techniques]");
        for (name, on) in Techniques::NAMES.iter().zip(t.techniques.flags()) {
            let _ = writeln!(s, "{name} = {on}");
        }
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(
            s,
            "\n[experiment]\nseeds = {seeds}\nablation_rows = {}\nscenarios = {}\ntransfer_baseline = {:?}\ntransfer_targets = {}\nexport_format = {}",
            self.ablation_rows.join("; "),
            self.scenarios.join(","),
            self.transfer_baseline,
            list(&self.transfer_targets),
            self.export_format
        );
        s
    }
}

/// Technique set of an ablation row: `all-on`, `all-off`, or `all-on`
/// followed by `-name` entries separated by spaces, e.g. `-rwf -fourier`.
pub fn techniques_row(row: &str) -> hemoflow::Result<Techniques> {
    match row {
        "all-on" => return Ok(Techniques::ALL_ON),
        "all-off" => return Ok(Techniques::ALL_OFF),
        _ => {}
    }
    let mut t = Techniques::ALL_ON;
    for part in row.split_whitespace() {
        let name = part
            .strip_prefix('-')
            .ok_or_else(|| hemoflow::Error::Config(format!("row entry {part:?} must start with '-'")))?;
        t.set(name, false)?;
    }
    Ok(t)
}
