//! Error metrics, reports, experiment drivers and field export.

mod experiment;
mod export;

pub use experiment::{
    ablation_run, default_split_scenarios, residual_metric, split_study, CoordinateExperiment, CoordinateRun,
    OperatorExperiment, OperatorInstance, SplitScenario,
};
pub use export::{export_field, ExportFormat, VTK_MAGIC};

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::geometry::{Stratum, StratifiedPointCloud};
use crate::nn::Network;
use crate::operators::DeepONet;
use crate::physics::{FlowField, Frame, Scales};

pub const DEFAULT_BATCH: usize = 10_000;

/// Mean over consecutive batches of `|pred - truth| / |truth|`. Batches whose
/// truth is identically zero are skipped with a warning.
pub fn l2_relative_error(pred: &[f64], truth: &[f64], batch: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension { expected: truth.len(), got: pred.len(), context: "predicted values" });
    }
    if batch == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (k, (p, t)) in pred.chunks(batch).zip(truth.chunks(batch)).enumerate() {
        let den = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        if den == 0.0 {
            log::warn!("batch {k} has an all-zero reference and is left out of the error");
            continue;
        }
        let num = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        sum += num / den;
        used += 1;
    }
    if used == 0 {
        return Err(Error::usage("reference values are identically zero"));
    }
    Ok(sum / used as f64)
}

pub fn velocity_magnitude(field: &FlowField) -> Vec<f64> {
    field.v.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).collect()
}

/// Removes the mean offset between predicted and reference pressure.
/// Returns the corrected values and the shift.
pub fn pressure_shift_correct(pred: &[f64], truth: &[f64]) -> Result<(Vec<f64>, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension { expected: truth.len(), got: pred.len(), context: "pressure values" });
    }
    if pred.is_empty() {
        return Ok((Vec::new(), 0.0));
    }
    let shift = pred.iter().zip(truth).map(|(a, b)| a - b).sum::<f64>() / pred.len() as f64;
    Ok((pred.iter().map(|p| p - shift).collect(), shift))
}

/// Reference field of a cloud in SI units: every boundary and volume point
/// when an oracle is attached, otherwise the points carrying both velocity
/// and pressure labels. Data points repeat volume points and are skipped
/// unless they are the only labelled ones.
pub fn reference_field(cloud: &StratifiedPointCloud) -> Result<FlowField> {
    let (mut points, mut v, mut p) = (Vec::new(), Vec::new(), Vec::new());
    let strata = [Stratum::Inlet, Stratum::Wall, Stratum::Outlet, Stratum::Volume];
    if cloud.oracle.is_some() {
        for s in strata {
            for x in &cloud.get(s).x {
                let (tv, tp) = cloud.truth(x).expect("oracle attached");
                points.push(*x);
                v.push(tv);
                p.push(tp);
            }
        }
    } else {
        for s in strata.into_iter().chain([Stratum::Data]) {
            if s == Stratum::Data && !points.is_empty() {
                break;
            }
            let set = cloud.get(s);
            for i in 0..set.len() {
                if let (Some(tv), Some(tp)) = (set.v[i], set.p[i]) {
                    points.push(set.x[i]);
                    v.push(tv);
                    p.push(tp);
                }
            }
        }
    }
    if points.is_empty() {
        return Err(Error::usage("no reference values: the cloud has neither an oracle nor full labels"));
    }
    FlowField::new(points, v, p, Frame::Dimensional)
}

/// Something that predicts `(v1, v2, v3, p)` in SI units at SI points.
pub trait FieldModel {
    fn predict_si(&self, points: &[[f64; 3]]) -> Result<Vec<[f64; 4]>>;
}

/// A coordinate network together with the frame it was trained in.
pub struct CoordinateModel<'a> {
    pub net: &'a Network,
    pub scales: Scales,
}

impl FieldModel for CoordinateModel<'_> {
    fn predict_si(&self, points: &[[f64; 3]]) -> Result<Vec<[f64; 4]>> {
        let x: Vec<f64> = points.iter().flat_map(|p| self.scales.point(p)).collect();
        let out = self.net.predict(&x)?;
        Ok(out.chunks(4).map(|o| self.scales.output_back(o)).collect())
    }
}

/// An operator with the sensor values of one function instance.
pub struct OperatorField<'a> {
    pub op: &'a DeepONet,
    pub scales: Scales,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
}

impl FieldModel for OperatorField<'_> {
    fn predict_si(&self, points: &[[f64; 3]]) -> Result<Vec<[f64; 4]>> {
        let x: Vec<f64> = points.iter().flat_map(|p| self.scales.point(p)).collect();
        let out = self.op.predict(&self.s1, &self.s2, &x)?;
        Ok(out.chunks(4).map(|o| self.scales.output_back(o)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldErrors {
    pub velocity: f64,
    pub pressure: f64,
    /// Pressure shift removed before scoring, if correction was applied.
    pub shift: Option<f64>,
    pub infer_seconds: f64,
    pub points: usize,
}

/// Velocity-magnitude and pressure errors of `model` against `truth`.
pub fn evaluate_field(model: &dyn FieldModel, truth: &FlowField, shift_correct: bool) -> Result<FieldErrors> {
    let start = Instant::now();
    let pred = model.predict_si(&truth.points)?;
    let infer_seconds = start.elapsed().as_secs_f64();
    let pv = FlowField::new(
        truth.points.clone(),
        pred.iter().map(|o| [o[0], o[1], o[2]]).collect(),
        pred.iter().map(|o| o[3]).collect(),
        Frame::Dimensional,
    )?;
    let velocity = l2_relative_error(&velocity_magnitude(&pv), &velocity_magnitude(truth), DEFAULT_BATCH)?;
    let (p, shift) = if shift_correct {
        let (p, s) = pressure_shift_correct(&pv.p, &truth.p)?;
        (p, Some(s))
    } else {
        (pv.p, None)
    };
    let pressure = l2_relative_error(&p, &truth.p, DEFAULT_BATCH)?;
    Ok(FieldErrors { velocity, pressure, shift, infer_seconds, points: truth.len() })
}

/// Times a full four-field prediction at `points`; returns seconds and
/// points per second.
pub fn time_inference(model: &dyn FieldModel, points: &[[f64; 3]]) -> Result<(f64, f64)> {
    let start = Instant::now();
    let out = model.predict_si(points)?;
    let secs = start.elapsed().as_secs_f64();
    if out.len() != points.len() {
        return Err(Error::Dimension { expected: points.len(), got: out.len(), context: "inference outputs" });
    }
    Ok((secs, points.len() as f64 / secs.max(f64::MIN_POSITIVE)))
}

pub const REPORT_HEADER: [&str; 8] = ["model", "V", "split", "vel_l2_rel", "pres_l2_rel", "train_s", "infer_s", "stop_iter"];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub model: String,
    pub v_tag: String,
    pub split: String,
    pub velocity: f64,
    pub pressure: f64,
    pub train_seconds: f64,
    pub infer_seconds: f64,
    pub stop_iter: Option<usize>,
}

impl EvalEntry {
    pub fn new(model: &str, v: f64, split: &str, errors: &FieldErrors, train_seconds: f64, stop_iter: Option<usize>) -> Self {
        EvalEntry {
            model: model.into(),
            v_tag: v_tag(v),
            split: split.into(),
            velocity: errors.velocity,
            pressure: errors.pressure,
            train_seconds,
            infer_seconds: errors.infer_seconds,
            stop_iter,
        }
    }
}

/// Text form of a velocity such as `0.1` or `0.04`.
pub fn v_tag(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    /// Appends an entry; `(V, split, model)` must be new.
    pub fn push(&mut self, entry: EvalEntry) -> Result<()> {
        if self.entries.iter().any(|e| e.v_tag == entry.v_tag && e.split == entry.split && e.model == entry.model) {
            return Err(Error::Validation(vec![format!(
                "duplicate report entry for model {} V={} split {}",
                entry.model, entry.v_tag, entry.split
            )]));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = EvalEntry>) -> Result<()> {
        entries.into_iter().try_for_each(|e| self.push(e))
    }

    pub fn to_csv(&self) -> String {
        let mut s = REPORT_HEADER.join(",");
        s.push('\n');
        for e in &self.entries {
            let stop = e.stop_iter.map(|i| i.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{:?},{:?},{:.3},{:.3},{}",
                e.model, e.v_tag, e.split, e.velocity, e.pressure, e.train_seconds, e.infer_seconds, stop
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Mean and sample standard deviation of both errors for each
    /// `(model prefix, V, split)` group, where the prefix drops everything
    /// after the last `@` of the model id (the seed suffix).
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows: Vec<SummaryRow> = Vec::new();
        let mut groups: Vec<((String, String, String), Vec<&EvalEntry>)> = Vec::new();
        for e in &self.entries {
            let model = e.model.rsplit_once('@').map_or(e.model.as_str(), |(m, _)| m).to_string();
            let key = (model, e.v_tag.clone(), e.split.clone());
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, g)) => g.push(e),
                None => groups.push((key, vec![e])),
            }
        }
        for ((model, v_tag, split), g) in groups {
            let (vm, vs) = mean_sd(&g.iter().map(|e| e.velocity).collect::<Vec<_>>());
            let (pm, ps) = mean_sd(&g.iter().map(|e| e.pressure).collect::<Vec<_>>());
            rows.push(SummaryRow { model, v_tag, split, runs: g.len(), velocity: (vm, vs), pressure: (pm, ps) });
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub model: String,
    pub v_tag: String,
    pub split: String,
    pub runs: usize,
    pub velocity: (f64, f64),
    pub pressure: (f64, f64),
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests;
