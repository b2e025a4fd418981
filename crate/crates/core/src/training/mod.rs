//! Loss assembly, loss balancing, optimization and the training loop.

mod checkpoint;
mod loss;
mod trainer;

pub use checkpoint::{load_training_checkpoint, save_training_checkpoint, TrainingState};
pub use loss::{evaluate_terms, Model, Problem, TermData, TermEval};
pub use trainer::{train, transfer_train, warmup_train, MetricsRow, RunOutputs, TrainOutcome, METRICS_HEADER};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Architecture, Embedding, Factorization, NetworkSpec};
use crate::operators::OperatorSpec;

/// The five loss terms, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Data,
    Inlet,
    Wall,
    Outlet,
    Phy,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Data, Term::Inlet, Term::Wall, Term::Outlet, Term::Phy];

    pub fn name(self) -> &'static str {
        match self {
            Term::Data => "data",
            Term::Inlet => "inlet",
            Term::Wall => "wall",
            Term::Outlet => "outlet",
            Term::Phy => "phy",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Data and boundary terms only.
    DeepNn,
    Pinn,
    /// DeepNN warm-up followed by PINN training from its best checkpoint.
    WuPinn,
    DeepONet,
    PiDeepONet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DeepNn => "deepnn",
            ModelKind::Pinn => "pinn",
            ModelKind::WuPinn => "wu-pinn",
            ModelKind::DeepONet => "deeponet",
            ModelKind::PiDeepONet => "pi-deeponet",
        }
    }

    pub fn is_operator(self) -> bool {
        matches!(self, ModelKind::DeepONet | ModelKind::PiDeepONet)
    }

    pub fn uses_physics(self) -> bool {
        matches!(self, ModelKind::Pinn | ModelKind::WuPinn | ModelKind::PiDeepONet)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ModelKind> {
        [ModelKind::DeepNn, ModelKind::Pinn, ModelKind::WuPinn, ModelKind::DeepONet, ModelKind::PiDeepONet]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown model kind {s:?}")))
    }
}

/// Per-term loss values and weights. Inactive terms carry loss 0 and
/// weight 1, so `total` is always the weighted sum over all five.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub values: [f64; 5],
    pub lambdas: [f64; 5],
    pub active: [bool; 5],
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(values: [f64; 5], lambdas: [f64; 5], active: [bool; 5]) -> LossBreakdown {
        let total = (0..5).filter(|&i| active[i]).map(|i| lambdas[i] * values[i]).sum();
        LossBreakdown { values, lambdas, active, total }
    }

    /// Sum of the active terms without weights.
    pub fn raw_total(&self) -> f64 {
        (0..5).filter(|&i| self.active[i]).map(|i| self.values[i]).sum()
    }

    pub fn get(&self, t: Term) -> f64 {
        self.values[t.index()]
    }
}

/// New Grad-Norm weights from unweighted per-term gradient norms: the
/// target weights make every `lambda_i * norm_i` equal to the mean norm,
/// blended with the old weights by `momentum`. Terms with a zero norm keep
/// their weight; all-zero norms leave every weight unchanged.
pub fn grad_norm_update(lambda: &[f64], norms: &[f64], momentum: f64) -> Result<Vec<f64>> {
    if lambda.len() != norms.len() {
        return Err(Error::Dimension { expected: lambda.len(), got: norms.len(), context: "grad-norm terms" });
    }
    if norms.iter().any(|n| !n.is_finite() || *n < 0.0) {
        return Err(Error::usage(format!("grad-norm needs finite gradient norms, got {norms:?}")));
    }
    let sum: f64 = norms.iter().sum();
    if sum == 0.0 {
        log::warn!("all gradient norms are zero; grad-norm weights unchanged");
        return Ok(lambda.to_vec());
    }
    let card = norms.len() as f64;
    Ok(lambda
        .iter()
        .zip(norms)
        .map(|(&l, &n)| if n > 0.0 { momentum * l + (1.0 - momentum) * sum / (card * n) } else { l })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay_rate: 0.95, decay_steps: 3000, decay: true }
    }
}

impl AdamConfig {
    /// `lr * rate^(t / steps)`, split so that multiples of `steps` hit
    /// `lr * rate^k` exactly.
    pub fn learning_rate(&self, t: u64) -> f64 {
        if !self.decay {
            return self.lr;
        }
        let k = t / self.decay_steps;
        let frac = (t % self.decay_steps) as f64 / self.decay_steps as f64;
        let whole = self.decay_rate.powi(k.min(i32::MAX as u64) as i32);
        if frac == 0.0 {
            self.lr * whole
        } else {
            self.lr * whole * self.decay_rate.powf(frac)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay_rate > 0.0
            && self.decay_rate <= 1.0
            && self.decay_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Extra factor on the scheduled rate, halved by the divergence guard.
    pub lr_factor: f64,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Adam {
        Adam { config, t: 0, m: vec![0.0; n], v: vec![0.0; n], lr_factor: 1.0 }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate(self.t) * self.lr_factor
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension { expected: self.m.len(), got: grad.len(), context: "optimizer step" });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: self.t as usize,
                detail: format!("gradient entry {i} is {}", grad[i]),
            });
        }
        let c = &self.config;
        let lr = self.learning_rate();
        let t = (self.t + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + c.eps);
        }
        self.t += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradNormConfig {
    pub momentum: f64,
    pub every: usize,
}

impl Default for GradNormConfig {
    fn default() -> Self {
        GradNormConfig { momentum: 0.9, every: 1000 }
    }
}

/// The six enhancement techniques that the ablation toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Techniques {
    pub nondimensional: bool,
    pub grad_norm: bool,
    pub fourier: bool,
    pub rwf: bool,
    pub modified_mlp: bool,
    pub lr_decay: bool,
}

impl Techniques {
    pub const ALL_ON: Techniques =
        Techniques { nondimensional: true, grad_norm: true, fourier: true, rwf: true, modified_mlp: true, lr_decay: true };
    pub const ALL_OFF: Techniques = Techniques {
        nondimensional: false,
        grad_norm: false,
        fourier: false,
        rwf: false,
        modified_mlp: false,
        lr_decay: false,
    };

    pub const NAMES: [&'static str; 6] = ["nondimensional", "grad-norm", "fourier", "rwf", "modified-mlp", "lr-decay"];

    pub fn flags(&self) -> [bool; 6] {
        [self.nondimensional, self.grad_norm, self.fourier, self.rwf, self.modified_mlp, self.lr_decay]
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "nondimensional" => &mut self.nondimensional,
            "grad-norm" => &mut self.grad_norm,
            "fourier" => &mut self.fourier,
            "rwf" => &mut self.rwf,
            "modified-mlp" => &mut self.modified_mlp,
            "lr-decay" => &mut self.lr_decay,
            _ => return Err(Error::config(format!("unknown technique {name:?}"))),
        };
        *slot = on;
        Ok(())
    }

    /// Short label such as `nd+gn+ff`, or `none`.
    pub fn label(&self) -> String {
        let short = ["nd", "gn", "ff", "rwf", "mmlp", "lrd"];
        let on: Vec<&str> = self.flags().iter().zip(short).filter(|(f, _)| **f).map(|(_, s)| s).collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub iterations: usize,
    /// Points drawn per stratum per iteration, clamped to the stratum size.
    pub batch_size: usize,
    /// DeepNN phase length of a warm-up run.
    pub warmup_iterations: usize,
    pub seed: u64,
    /// Stop once the unweighted batch loss is at or below this value.
    pub target_total_loss: Option<f64>,
    pub log_every: usize,
    /// Cadence of the restore point used by the divergence guard and of
    /// on-disk checkpoints.
    pub checkpoint_every: usize,
    pub techniques: Techniques,
    pub grad_norm: GradNormConfig,
    pub adam: AdamConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub fourier_features: usize,
    pub fourier_sigma: f64,
    /// Merged feature width of operator models.
    pub q: usize,
    pub branch_width: usize,
    pub branch_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: ModelKind::Pinn,
            iterations: 20_000,
            batch_size: 256,
            warmup_iterations: 0,
            seed: 0,
            target_total_loss: None,
            log_every: 500,
            checkpoint_every: 1000,
            techniques: Techniques::ALL_ON,
            grad_norm: GradNormConfig::default(),
            adam: AdamConfig::default(),
            hidden_width: 64,
            hidden_layers: 4,
            fourier_features: 32,
            fourier_sigma: 0.25,
            q: 128,
            branch_width: 64,
            branch_layers: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("batch-size, log-every and checkpoint-every must be positive"));
        }
        if self.kind == ModelKind::WuPinn && self.warmup_iterations >= self.iterations && self.iterations > 0 {
            return Err(Error::config(format!(
                "warm-up iterations ({}) must be below the total ({})",
                self.warmup_iterations, self.iterations
            )));
        }
        if self.grad_norm.every == 0 || !(0.0..=1.0).contains(&self.grad_norm.momentum) {
            return Err(Error::config("grad-norm needs every >= 1 and momentum in [0, 1]"));
        }
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::config("hidden-width and hidden-layers must be positive"));
        }
        if self.kind.is_operator() && (self.q < 4 || self.branch_width == 0 || self.branch_layers == 0) {
            return Err(Error::config("operator models need q >= 4 and positive branch sizes"));
        }
        if let Some(t) = self.target_total_loss {
            if t.is_nan() {
                return Err(Error::config("target-total-loss is NaN"));
            }
        }
        self.adam.validate()
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig { decay: self.techniques.lr_decay, ..self.adam }
    }

    fn apply_techniques(&self, spec: NetworkSpec, embed: bool) -> NetworkSpec {
        let t = &self.techniques;
        let mut spec = spec;
        if t.modified_mlp {
            spec = spec.with_architecture(Architecture::ModifiedMlp);
        }
        if t.fourier && embed {
            spec = spec.with_embedding(Embedding::Fourier { features: self.fourier_features, sigma: self.fourier_sigma });
        }
        if t.rwf {
            spec = spec.with_factorization(Factorization::DEFAULT_RWF);
        }
        spec
    }

    /// Coordinate network `x -> (v1, v2, v3, p)` whose inputs are mapped
    /// from the box `[lo, hi]` onto `[-1, 1]^3`.
    pub fn network_spec(&self, lo: &[f64; 3], hi: &[f64; 3]) -> NetworkSpec {
        let base = NetworkSpec::mlp(3, 4, self.hidden_layers, self.hidden_width)
            .with_input_box(lo, hi)
            .with_seed(self.seed);
        self.apply_techniques(base, true)
    }

    /// Operator whose trunk follows the technique toggles; branches are
    /// plain or modified MLPs of the sensor values.
    pub fn operator_spec(&self, m1: usize, m2: usize, lo: &[f64; 3], hi: &[f64; 3]) -> OperatorSpec {
        let trunk = self.apply_techniques(
            NetworkSpec::mlp(3, self.q, self.hidden_layers, self.hidden_width)
                .with_input_box(lo, hi)
                .with_seed(self.seed),
            true,
        );
        let branch = |m: usize, stream: u64| {
            self.apply_techniques(
                NetworkSpec::mlp(m, self.q, self.branch_layers, self.branch_width)
                    .with_seed(self.seed.wrapping_add(stream)),
                false,
            )
        };
        OperatorSpec::new(branch(m1, 1), branch(m2, 2), trunk, self.q)
    }
}
