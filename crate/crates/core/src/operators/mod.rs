//! Multi-input, multi-output DeepONet.
//!
//! Two branch networks encode the inlet-velocity and outlet-pressure input
//! functions at fixed sensors, a trunk network encodes the query point.
//! Output `k` is `sum_{j in range_k} b1_j * b2_j * tau_j(x)`, so input
//! derivatives flow through the trunk only.

mod triplet;

pub use triplet::{build_triplets, instance_sensors, OperatorTriplet, SensorLayout, TRIPLET_FILES};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::checkpoint::{expect_magic, kv_get, kv_parse, read_kv, read_network, write_kv, write_network};
use crate::nn::jet::{Jets, Order, Trace};
use crate::nn::{Network, NetworkSpec};

pub const OUTPUT_NAMES: [&str; 4] = ["v1", "v2", "v3", "p"];

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec {
    pub branch1: NetworkSpec,
    pub branch2: NetworkSpec,
    pub trunk: NetworkSpec,
    /// Merged feature width.
    pub q: usize,
    /// Output name and the feature range it sums over.
    pub partition: Vec<(String, Range<usize>)>,
}

impl OperatorSpec {
    /// Splits `q` evenly over `(v1, v2, v3, p)`.
    pub fn new(branch1: NetworkSpec, branch2: NetworkSpec, trunk: NetworkSpec, q: usize) -> OperatorSpec {
        let part = q / 4;
        let partition = OUTPUT_NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| (name.to_string(), k * part..if k == 3 { q } else { (k + 1) * part }))
            .collect();
        OperatorSpec { branch1, branch2, trunk, q, partition }
    }

    pub fn validate(&self) -> Result<()> {
        self.branch1.validate()?;
        self.branch2.validate()?;
        self.trunk.validate()?;
        for (name, spec) in [("branch1", &self.branch1), ("branch2", &self.branch2), ("trunk", &self.trunk)] {
            if spec.output_dim != self.q {
                return Err(Error::config(format!("{name} output width {} differs from q = {}", spec.output_dim, self.q)));
            }
        }
        if self.trunk.input_dim != 3 {
            return Err(Error::config("trunk input must be the three coordinates"));
        }
        let mut next = 0;
        for (name, r) in &self.partition {
            if r.start != next || r.end <= r.start {
                return Err(Error::config(format!("partition range {r:?} of {name} is not contiguous and non-empty")));
            }
            next = r.end;
        }
        if next != self.q || self.partition.is_empty() {
            return Err(Error::config(format!("partition covers [0, {next}) but q = {}", self.q)));
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        self.partition.len()
    }

    fn owner(&self) -> Vec<usize> {
        let mut owner = vec![0; self.q];
        for (k, (_, r)) in self.partition.iter().enumerate() {
            owner[r.clone()].iter_mut().for_each(|o| *o = k);
        }
        owner
    }
}

/// Sensor rows of `K` function instances, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRows {
    pub m1: usize,
    pub m2: usize,
    pub sensors1: Vec<f64>,
    pub sensors2: Vec<f64>,
}

impl SensorRows {
    pub fn new(m1: usize, m2: usize, sensors1: Vec<f64>, sensors2: Vec<f64>) -> Result<SensorRows> {
        if m1 == 0 || m2 == 0 || !sensors1.len().is_multiple_of(m1) || !sensors2.len().is_multiple_of(m2) {
            return Err(Error::Dimension { expected: m1, got: sensors1.len(), context: "sensor rows" });
        }
        if sensors1.len() / m1 != sensors2.len() / m2 {
            return Err(Error::Dimension {
                expected: sensors1.len() / m1,
                got: sensors2.len() / m2,
                context: "instances in sensor rows",
            });
        }
        Ok(SensorRows { m1, m2, sensors1, sensors2 })
    }

    pub fn single(s1: &[f64], s2: &[f64]) -> Result<SensorRows> {
        SensorRows::new(s1.len(), s2.len(), s1.to_vec(), s2.to_vec())
    }

    pub fn instances(&self) -> usize {
        self.sensors1.len() / self.m1
    }
}

#[derive(Debug, Clone)]
pub struct DeepONet {
    pub spec: OperatorSpec,
    pub branch1: Network,
    pub branch2: Network,
    pub trunk: Network,
}

/// Forward state of a batch, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct OperatorTrace {
    b1: Trace,
    b2: Trace,
    trunk: Trace,
    /// `K x q` merged branch weights `b1 * b2`.
    weights: Vec<f64>,
    instance: Vec<usize>,
    pub output: Jets,
}

/// Output values and input derivatives at one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputDerivatives {
    pub value: Vec<f64>,
    /// `first[k][j] = d out_k / d x_j`
    pub first: Vec<[f64; 3]>,
    pub second: Vec<[f64; 3]>,
}

impl DeepONet {
    pub fn new(spec: OperatorSpec) -> Result<DeepONet> {
        spec.validate()?;
        Ok(DeepONet {
            branch1: Network::new(spec.branch1.clone())?,
            branch2: Network::new(spec.branch2.clone())?,
            trunk: Network::new(spec.trunk.clone())?,
            spec,
        })
    }

    pub fn num_params(&self) -> usize {
        self.branch1.num_params() + self.branch2.num_params() + self.trunk.num_params()
    }

    fn ranges(&self) -> [Range<usize>; 3] {
        let a = self.branch1.num_params();
        let b = a + self.branch2.num_params();
        [0..a, a..b, b..b + self.trunk.num_params()]
    }

    /// Parameters laid out as branch1, branch2, trunk.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(&self.branch1.params.values);
        p.extend_from_slice(&self.branch2.params.values);
        p.extend_from_slice(&self.trunk.params.values);
        p
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Dimension { expected: self.num_params(), got: values.len(), context: "operator parameters" });
        }
        let [r1, r2, r3] = self.ranges();
        self.branch1.params.values.copy_from_slice(&values[r1]);
        self.branch2.params.values.copy_from_slice(&values[r2]);
        self.trunk.params.values.copy_from_slice(&values[r3]);
        Ok(())
    }

    fn check_rows(&self, rows: &SensorRows) -> Result<()> {
        if rows.m1 != self.spec.branch1.input_dim {
            return Err(Error::Dimension { expected: self.spec.branch1.input_dim, got: rows.m1, context: "sensors1 width" });
        }
        if rows.m2 != self.spec.branch2.input_dim {
            return Err(Error::Dimension { expected: self.spec.branch2.input_dim, got: rows.m2, context: "sensors2 width" });
        }
        Ok(())
    }

    /// Batched forward over points `x` (row-major, 3 per point), where point
    /// `i` belongs to instance `instance[i]` of `rows`.
    pub fn forward_jets(&self, x: &[f64], instance: &[usize], rows: &SensorRows, order: Order) -> Result<OperatorTrace> {
        self.check_rows(rows)?;
        let n = x.len() / 3;
        if !x.len().is_multiple_of(3) || instance.len() != n {
            return Err(Error::Dimension { expected: n, got: instance.len(), context: "operator batch rows" });
        }
        let k = rows.instances();
        if let Some(&bad) = instance.iter().find(|&&i| i >= k) {
            return Err(Error::Dimension { expected: k, got: bad, context: "instance index" });
        }
        let q = self.spec.q;
        let b1 = self.branch1.forward_jets(&rows.sensors1, Order::Value)?;
        let b2 = self.branch2.forward_jets(&rows.sensors2, Order::Value)?;
        let weights: Vec<f64> =
            b1.output.channel(0).iter().zip(b2.output.channel(0)).map(|(a, b)| a * b).collect();
        let trunk = self.trunk.forward_jets(x, order)?;
        let outs = self.spec.outputs();
        let mut output = Jets::zeros(order, 3, n, outs);
        for c in 0..trunk.output.channels() {
            let tau = trunk.output.channel(c);
            let out = output.channel_mut(c);
            for i in 0..n {
                let w = &weights[instance[i] * q..(instance[i] + 1) * q];
                let t = &tau[i * q..(i + 1) * q];
                for (o, (_, r)) in self.spec.partition.iter().enumerate() {
                    out[i * outs + o] = r.clone().map(|j| w[j] * t[j]).sum();
                }
            }
        }
        Ok(OperatorTrace { b1, b2, trunk, weights, instance: instance.to_vec(), output })
    }

    /// Accumulates into `grad` the parameter gradient of the scalar whose
    /// adjoint with respect to `trace.output` is `out_adj`.
    pub fn backward_jets(&self, trace: &OperatorTrace, out_adj: &Jets, grad: &mut [f64]) -> Result<()> {
        if out_adj.data().len() != trace.output.data().len() {
            return Err(Error::Dimension {
                expected: trace.output.data().len(),
                got: out_adj.data().len(),
                context: "operator output adjoint",
            });
        }
        if grad.len() != self.num_params() {
            return Err(Error::Dimension { expected: self.num_params(), got: grad.len(), context: "gradient" });
        }
        let q = self.spec.q;
        let outs = self.spec.outputs();
        let owner = self.spec.owner();
        let n = trace.instance.len();
        let mut tau_adj = trace.trunk.output.clone();
        let mut w_adj = vec![0.0; trace.weights.len()];
        for c in 0..tau_adj.channels() {
            let tau = trace.trunk.output.channel(c);
            let adj = out_adj.channel(c);
            let t_adj = tau_adj.channel_mut(c);
            for i in 0..n {
                let k = trace.instance[i];
                let w = &trace.weights[k * q..(k + 1) * q];
                let wa = &mut w_adj[k * q..(k + 1) * q];
                let a = &adj[i * outs..(i + 1) * outs];
                for j in 0..q {
                    let aj = a[owner[j]];
                    t_adj[i * q + j] = aj * w[j];
                    wa[j] += aj * tau[i * q + j];
                }
            }
        }
        let mut b1_adj = trace.b1.output.clone();
        let mut b2_adj = trace.b2.output.clone();
        {
            let b1 = trace.b1.output.channel(0);
            let b2 = trace.b2.output.channel(0);
            let a1 = b1_adj.channel_mut(0);
            for (j, a) in a1.iter_mut().enumerate() {
                *a = w_adj[j] * b2[j];
            }
            let a2 = b2_adj.channel_mut(0);
            for (j, a) in a2.iter_mut().enumerate() {
                *a = w_adj[j] * b1[j];
            }
        }
        let [r1, r2, r3] = self.ranges();
        self.branch1.backward_jets(&trace.b1, &b1_adj, &mut grad[r1])?;
        self.branch2.backward_jets(&trace.b2, &b2_adj, &mut grad[r2])?;
        self.trunk.backward_jets(&trace.trunk, &tau_adj, &mut grad[r3])?;
        Ok(())
    }

    /// `(v1, v2, v3, p)` for one sensor pair at one point.
    pub fn eval_point(&self, s1: &[f64], s2: &[f64], x: &[f64; 3]) -> Result<Vec<f64>> {
        let rows = SensorRows::single(s1, s2)?;
        Ok(self.forward_jets(x, &[0], &rows, Order::Value)?.output.channel(0).to_vec())
    }

    /// Values, gradients and diagonal Hessians of every output at `x`.
    pub fn input_derivatives(&self, s1: &[f64], s2: &[f64], x: &[f64; 3]) -> Result<OutputDerivatives> {
        let rows = SensorRows::single(s1, s2)?;
        let out = self.forward_jets(x, &[0], &rows, Order::Second)?.output;
        let outs = self.spec.outputs();
        Ok(OutputDerivatives {
            value: (0..outs).map(|k| out.value(0, k)).collect(),
            first: (0..outs).map(|k| [0, 1, 2].map(|j| out.first(j, 0, k))).collect(),
            second: (0..outs).map(|k| [0, 1, 2].map(|j| out.second(j, 0, k))).collect(),
        })
    }

    /// Output values at many points of one instance, `n x outputs`.
    pub fn predict(&self, s1: &[f64], s2: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        const CHUNK: usize = 4096;
        let rows = SensorRows::single(s1, s2)?;
        let mut out = Vec::with_capacity(x.len() / 3 * self.spec.outputs());
        for chunk in x.chunks(3 * CHUNK) {
            let inst = vec![0; chunk.len() / 3];
            out.extend_from_slice(self.forward_jets(chunk, &inst, &rows, Order::Value)?.output.channel(0));
        }
        Ok(out)
    }
}

const MAGIC: &[u8; 4] = b"HFON";
const VERSION: u32 = 1;

pub fn write_operator(w: &mut impl Write, op: &DeepONet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let mut kv = vec![("q".to_string(), op.spec.q.to_string())];
    kv.push(("outputs".into(), op.spec.partition.len().to_string()));
    for (k, (name, r)) in op.spec.partition.iter().enumerate() {
        kv.push((format!("partition.{k}"), format!("{name}:{}:{}", r.start, r.end)));
    }
    write_kv(w, &kv)?;
    write_network(w, &op.branch1)?;
    write_network(w, &op.branch2)?;
    write_network(w, &op.trunk)?;
    Ok(())
}

pub fn read_operator(r: &mut impl Read) -> Result<DeepONet> {
    let bad = |m: String| Error::Checkpoint(m);
    expect_magic(r, MAGIC)?;
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    if u32::from_le_bytes(v) != VERSION {
        return Err(bad(format!("unsupported operator checkpoint version {}", u32::from_le_bytes(v))));
    }
    let kv = read_kv(r)?;
    let q: usize = kv_parse(&kv, "q")?;
    let outputs: usize = kv_parse(&kv, "outputs")?;
    let mut partition = Vec::with_capacity(outputs);
    for k in 0..outputs {
        let raw = kv_get(&kv, &format!("partition.{k}"))?;
        let parts: Vec<&str> = raw.split(':').collect();
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad partition entry {raw:?}")));
        if parts.len() != 3 {
            return Err(bad(format!("bad partition entry {raw:?}")));
        }
        partition.push((parts[0].to_string(), parse(parts[1])?..parse(parts[2])?));
    }
    let branch1 = read_network(r)?;
    let branch2 = read_network(r)?;
    let trunk = read_network(r)?;
    let spec = OperatorSpec {
        branch1: branch1.spec.clone(),
        branch2: branch2.spec.clone(),
        trunk: trunk.spec.clone(),
        q,
        partition,
    };
    spec.validate().map_err(|e| bad(format!("invalid operator spec: {e}")))?;
    Ok(DeepONet { spec, branch1, branch2, trunk })
}

impl DeepONet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_operator(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DeepONet> {
        read_operator(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests;
