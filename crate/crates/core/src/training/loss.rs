use std::io::{Read, Write};

use rayon::prelude::*;

use super::Term;
use crate::error::{Error, Result};
use crate::geometry::{PointSet, Stratum, StratifiedPointCloud};
use crate::nn::jet::{Jets, Order, Trace};
use crate::nn::checkpoint::{read_network, write_network};
use crate::nn::{Network, NetworkSpec};
use crate::operators::{read_operator, write_operator, DeepONet, OperatorTrace, OperatorTriplet, SensorRows};
use crate::physics::{residual_adjoint, residual_with, FieldJet, Frame, Scales};

/// Anything that maps points (plus, for operators, sensor rows) to
/// `(v1, v2, v3, p)` with input derivatives and a parameter gradient.
pub trait Model: Clone + Send + Sync {
    type Trace: Send;

    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, values: &[f64]) -> Result<()>;
    fn forward(&self, x: &[f64], instance: &[usize], rows: Option<&SensorRows>, order: Order) -> Result<Self::Trace>;
    fn output(trace: &Self::Trace) -> &Jets;
    fn backward(&self, trace: &Self::Trace, out_adj: &Jets, grad: &mut [f64]) -> Result<()>;
    /// True when both models have the same architecture and normalization,
    /// ignoring the initialization seed.
    fn same_architecture(&self, other: &Self) -> bool;
    fn write_model<W: Write>(&self, w: &mut W) -> Result<()>;
    fn read_model<R: Read>(r: &mut R) -> Result<Self>;
}

impl Model for Network {
    type Trace = Trace;

    fn num_params(&self) -> usize {
        Network::num_params(self)
    }

    fn params(&self) -> Vec<f64> {
        self.params.values.clone()
    }

    fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.values.len() {
            return Err(Error::Dimension { expected: self.params.values.len(), got: values.len(), context: "parameters" });
        }
        self.params.values.copy_from_slice(values);
        Ok(())
    }

    fn forward(&self, x: &[f64], _: &[usize], _: Option<&SensorRows>, order: Order) -> Result<Trace> {
        self.forward_jets(x, order)
    }

    fn output(trace: &Trace) -> &Jets {
        &trace.output
    }

    fn backward(&self, trace: &Trace, out_adj: &Jets, grad: &mut [f64]) -> Result<()> {
        self.backward_jets(trace, out_adj, grad)
    }

    fn same_architecture(&self, other: &Self) -> bool {
        NetworkSpec { seed: 0, ..self.spec.clone() } == NetworkSpec { seed: 0, ..other.spec.clone() }
    }

    fn write_model<W: Write>(&self, w: &mut W) -> Result<()> {
        write_network(w, self)
    }

    fn read_model<R: Read>(r: &mut R) -> Result<Self> {
        read_network(r)
    }
}

impl Model for DeepONet {
    type Trace = OperatorTrace;

    fn num_params(&self) -> usize {
        DeepONet::num_params(self)
    }

    fn params(&self) -> Vec<f64> {
        DeepONet::params(self)
    }

    fn set_params(&mut self, values: &[f64]) -> Result<()> {
        DeepONet::set_params(self, values)
    }

    fn forward(&self, x: &[f64], instance: &[usize], rows: Option<&SensorRows>, order: Order) -> Result<OperatorTrace> {
        let rows = rows.ok_or_else(|| Error::usage("operator evaluation needs sensor rows"))?;
        self.forward_jets(x, instance, rows, order)
    }

    fn output(trace: &OperatorTrace) -> &Jets {
        &trace.output
    }

    fn backward(&self, trace: &OperatorTrace, out_adj: &Jets, grad: &mut [f64]) -> Result<()> {
        self.backward_jets(trace, out_adj, grad)
    }

    fn same_architecture(&self, other: &Self) -> bool {
        let strip = |s: &NetworkSpec| NetworkSpec { seed: 0, ..s.clone() };
        self.spec.q == other.spec.q
            && self.spec.partition == other.spec.partition
            && strip(&self.spec.branch1) == strip(&other.spec.branch1)
            && strip(&self.spec.branch2) == strip(&other.spec.branch2)
            && strip(&self.spec.trunk) == strip(&other.spec.trunk)
    }

    fn write_model<W: Write>(&self, w: &mut W) -> Result<()> {
        write_operator(w, self)
    }

    fn read_model<R: Read>(r: &mut R) -> Result<Self> {
        read_operator(r)
    }
}

/// Points of one loss term in the model frame, with the target components
/// that enter the loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermData {
    pub x: Vec<f64>,
    /// Instance of every point; empty for single-instance models.
    pub instance: Vec<usize>,
    pub rows: Option<SensorRows>,
    /// `n x 4` targets; only entries with a true mask count.
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

impl TermData {
    pub fn len(&self) -> usize {
        self.x.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Supervised points from a stratum. Boundary terms use velocities only;
    /// a boundary stratum without any velocity labels falls back to its
    /// pressure labels, or to zero gauge pressure when it has none.
    fn from_points(set: &PointSet, scales: &Scales, term: Term) -> TermData {
        let mut t = TermData::default();
        let no_velocity = set.v.iter().all(Option::is_none);
        let with_pressure = term == Term::Data || no_velocity;
        for i in 0..set.len() {
            t.x.extend_from_slice(&scales.point(&set.x[i]));
            let v = set.v[i].map(|v| scales.velocity(&v));
            for k in 0..3 {
                t.targets.push(v.map_or(0.0, |v| v[k]));
                t.mask.push(v.is_some());
            }
            match (with_pressure, set.p[i]) {
                (true, Some(p)) => {
                    t.targets.push(scales.pressure(p));
                    t.mask.push(true);
                }
                (true, None) if term != Term::Data => {
                    t.targets.push(0.0);
                    t.mask.push(true);
                }
                _ => {
                    t.targets.push(0.0);
                    t.mask.push(false);
                }
            }
        }
        t
    }

    fn from_triplet(tr: &OperatorTriplet, term: Term) -> Result<TermData> {
        let (rows, instance) = tr.instance_rows()?;
        let mut mask = tr.mask.clone();
        let no_velocity = (0..tr.rows()).all(|r| !tr.mask[4 * r]);
        let mut targets = tr.targets.clone();
        if term != Term::Data {
            for r in 0..tr.rows() {
                if no_velocity {
                    // zero gauge pressure where the pressure is unknown
                    if !mask[4 * r + 3] {
                        targets[4 * r + 3] = 0.0;
                        mask[4 * r + 3] = true;
                    }
                } else {
                    mask[4 * r + 3] = false;
                }
            }
        }
        Ok(TermData { x: tr.coordinates.clone(), instance, rows: Some(rows), targets, mask })
    }

    /// Collocation points only.
    fn pool(x: Vec<f64>, instance: Vec<usize>, rows: Option<SensorRows>) -> TermData {
        TermData { x, instance, rows, targets: Vec::new(), mask: Vec::new() }
    }

    fn has_targets(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

/// Train and validation terms plus the residual coefficients of the frame
/// they are expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub train: [TermData; 5],
    pub val: [TermData; 5],
    pub scales: Scales,
}

fn cloud_terms(cloud: &StratifiedPointCloud, scales: &Scales) -> [TermData; 5] {
    let mut pool = Vec::new();
    for s in [Stratum::Inlet, Stratum::Wall, Stratum::Outlet, Stratum::Volume] {
        for x in &cloud.get(s).x {
            pool.extend_from_slice(&scales.point(x));
        }
    }
    [
        TermData::from_points(cloud.get(Stratum::Data), scales, Term::Data),
        TermData::from_points(cloud.get(Stratum::Inlet), scales, Term::Inlet),
        TermData::from_points(cloud.get(Stratum::Wall), scales, Term::Wall),
        TermData::from_points(cloud.get(Stratum::Outlet), scales, Term::Outlet),
        TermData::pool(pool, Vec::new(), None),
    ]
}

fn triplet_terms(t: &[OperatorTriplet; 5]) -> Result<[TermData; 5]> {
    // one shared sensor table for the collocation pool, keyed by instance
    let strata = [Stratum::Inlet, Stratum::Wall, Stratum::Outlet, Stratum::Volume];
    let mut x = Vec::new();
    let mut sample = Vec::new();
    let mut table: std::collections::BTreeMap<usize, (Vec<f64>, Vec<f64>)> = Default::default();
    for s in strata {
        let tr = &t[s.index()];
        x.extend_from_slice(&tr.coordinates);
        for (r, &id) in tr.sample_index.iter().enumerate() {
            sample.push(id);
            table.entry(id).or_insert_with(|| {
                (tr.sensors1[r * tr.m1..(r + 1) * tr.m1].to_vec(), tr.sensors2[r * tr.m2..(r + 1) * tr.m2].to_vec())
            });
        }
    }
    let pos: std::collections::BTreeMap<usize, usize> = table.keys().enumerate().map(|(k, &id)| (id, k)).collect();
    let (m1, m2) = (t[0].m1, t[0].m2);
    let rows = SensorRows::new(
        m1,
        m2,
        table.values().flat_map(|(a, _)| a.iter().copied()).collect(),
        table.values().flat_map(|(_, b)| b.iter().copied()).collect(),
    )?;
    let instance = sample.iter().map(|id| pos[id]).collect();
    let term = |s: Stratum, term: Term| -> Result<TermData> {
        if t[s.index()].is_empty() {
            Ok(TermData::default())
        } else {
            TermData::from_triplet(&t[s.index()], term)
        }
    };
    Ok([
        term(Stratum::Data, Term::Data)?,
        term(Stratum::Inlet, Term::Inlet)?,
        term(Stratum::Wall, Term::Wall)?,
        term(Stratum::Outlet, Term::Outlet)?,
        TermData::pool(x, instance, Some(rows)),
    ])
}

impl Problem {
    /// Coordinate-network problem from train and validation clouds, with
    /// every point converted into `scales`.
    pub fn from_clouds(train: &StratifiedPointCloud, val: &StratifiedPointCloud, scales: Scales) -> Problem {
        Problem { train: cloud_terms(train, &scales), val: cloud_terms(val, &scales), scales }
    }

    /// Operator problem from triplets already expressed in `scales`.
    pub fn from_triplets(train: &[OperatorTriplet; 5], val: &[OperatorTriplet; 5], scales: Scales) -> Result<Problem> {
        Ok(Problem { train: triplet_terms(train)?, val: triplet_terms(val)?, scales })
    }

    pub fn coefficients(&self) -> (f64, f64) {
        self.scales.coefficients
    }

    pub fn frame(&self) -> Frame {
        self.scales.frame
    }

    /// Which terms carry points in the training set.
    pub fn available(&self) -> [bool; 5] {
        let t = &self.train;
        [
            t[0].has_targets(),
            t[1].has_targets(),
            t[2].has_targets(),
            t[3].has_targets(),
            !t[4].is_empty(),
        ]
    }

    /// Terms that enter the loss, or a configuration error naming a
    /// mandatory term without points.
    pub fn active_terms(&self, physics: bool, data_required: bool) -> Result<[bool; 5]> {
        let avail = self.available();
        let mut active = [avail[0], true, true, true, physics];
        if data_required && !avail[0] {
            return Err(Error::config("this model kind needs a labelled data stratum"));
        }
        for term in [Term::Inlet, Term::Wall, Term::Outlet] {
            if !avail[term.index()] {
                return Err(Error::config(format!("the {term} stratum is empty")));
            }
        }
        if physics && !avail[4] {
            return Err(Error::config("no collocation points for the physics term"));
        }
        if !physics {
            active[4] = false;
        }
        Ok(active)
    }
}

/// Loss value and, when requested, its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TermEval {
    pub loss: f64,
    pub grad: Option<Vec<f64>>,
}

const VALUE_CHUNK: usize = 256;
const SECOND_CHUNK: usize = 64;

fn chunk_eval<M: Model>(
    model: &M,
    data: &TermData,
    idx: &[usize],
    term: Term,
    coefficients: (f64, f64),
    weight: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let n = idx.len();
    let mut x = Vec::with_capacity(3 * n);
    let mut inst = Vec::with_capacity(n);
    for &i in idx {
        x.extend_from_slice(&data.x[3 * i..3 * i + 3]);
        inst.push(data.instance.get(i).copied().unwrap_or(0));
    }
    let order = if term == Term::Phy { Order::Second } else { Order::Value };
    let trace = model.forward(&x, &inst, data.rows.as_ref(), order)?;
    let out = M::output(&trace);
    if out.width() != 4 {
        return Err(Error::Dimension { expected: 4, got: out.width(), context: "model outputs" });
    }
    let mut adj = want_grad.then(|| Jets::zeros(order, 3, n, 4));
    let mut loss = 0.0;
    if term == Term::Phy {
        let (a, b) = coefficients;
        for i in 0..n {
            let f = FieldJet::from_jets(out, i, Frame::Dimensionless)?;
            let e = residual_with(&f, a, b);
            loss += e.iter().map(|r| r * r).sum::<f64>();
            if let Some(adj) = adj.as_mut() {
                let e_adj = e.map(|r| 2.0 * weight * r);
                residual_adjoint(&f, a, b, e_adj).write_to(adj, i)?;
            }
        }
    } else {
        let vals = out.channel(0);
        for (r, &i) in idx.iter().enumerate() {
            for k in 0..4 {
                if !data.mask[4 * i + k] {
                    continue;
                }
                let d = vals[4 * r + k] - data.targets[4 * i + k];
                loss += d * d;
                if let Some(adj) = adj.as_mut() {
                    adj.channel_mut(0)[4 * r + k] = 2.0 * weight * d;
                }
            }
        }
    }
    let grad = match adj {
        Some(adj) => {
            let mut g = vec![0.0; model.num_params()];
            model.backward(&trace, &adj, &mut g)?;
            Some(g)
        }
        None => None,
    };
    Ok((loss * weight, grad))
}

/// Mean loss of `term` over the points `idx` of `data`. Work is split into
/// fixed-size chunks evaluated in parallel and summed in chunk order, so
/// the result does not depend on the number of threads.
pub fn evaluate_terms<M: Model>(
    model: &M,
    data: &TermData,
    idx: &[usize],
    term: Term,
    coefficients: (f64, f64),
    want_grad: bool,
) -> Result<TermEval> {
    if idx.is_empty() {
        return Ok(TermEval { loss: 0.0, grad: want_grad.then(|| vec![0.0; model.num_params()]) });
    }
    let weight = 1.0 / idx.len() as f64;
    let chunk = if term == Term::Phy { SECOND_CHUNK } else { VALUE_CHUNK };
    let parts: Vec<Result<(f64, Option<Vec<f64>>)>> = idx
        .par_chunks(chunk)
        .map(|c| chunk_eval(model, data, c, term, coefficients, weight, want_grad))
        .collect();
    let mut loss = 0.0;
    let mut grad: Option<Vec<f64>> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        match (&mut grad, g) {
            (None, Some(g)) => grad = Some(g),
            (Some(acc), Some(g)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            _ => {}
        }
    }
    Ok(TermEval { loss, grad })
}
