use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use super::SensorRows;
use crate::error::{Error, Result};
use crate::geometry::{DomainSpec, Stratum, StratifiedPointCloud};
use crate::physics::{parabolic_inlet, Scales};

pub const TRIPLET_FILES: [&str; 5] = ["coordinates.csv", "sensors1.csv", "sensors2.csv", "targets.csv", "index.csv"];

/// Fixed sensor points on the inlet and outlet discs, shared by every
/// function instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorLayout {
    pub inlet: Vec<[f64; 3]>,
    pub outlet: Vec<[f64; 3]>,
}

/// `m` points in equal-area cells of a disc: rings of equal area times
/// equal angular sectors, each point at its cell's area midpoint.
fn disc_sensors(m: usize, radius: f64, x2: f64) -> Vec<[f64; 3]> {
    let rings = (1..=m).filter(|r| m.is_multiple_of(*r) && r * r <= m).max().unwrap_or(1);
    let sectors = m / rings;
    let mut pts = Vec::with_capacity(m);
    for a in 0..rings {
        let r = radius * ((a as f64 + 0.5) / rings as f64).sqrt();
        // stagger alternate rings so sensors do not line up radially
        let offset = if a % 2 == 1 { PI / sectors as f64 } else { 0.0 };
        for b in 0..sectors {
            let t = 2.0 * PI * (b as f64 + 0.5) / sectors as f64 + offset;
            pts.push([r * t.cos(), x2, r * t.sin()]);
        }
    }
    pts
}

impl SensorLayout {
    pub fn area_stratified(domain: &DomainSpec, m1: usize, m2: usize) -> Result<SensorLayout> {
        if m1 == 0 || m2 == 0 {
            return Err(Error::config("sensor counts must be positive"));
        }
        domain.validate()?;
        Ok(SensorLayout {
            inlet: disc_sensors(m1, domain.radius, 0.0),
            outlet: disc_sensors(m2, domain.radius_profile(domain.length)?, domain.length),
        })
    }
}

/// Rows of `(coordinates, sensors1, sensors2, targets)` for N function
/// instances times P points, with the instance each row came from. Sensor
/// rows repeat for every point of an instance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OperatorTriplet {
    pub m1: usize,
    pub m2: usize,
    pub coordinates: Vec<f64>,
    pub sensors1: Vec<f64>,
    pub sensors2: Vec<f64>,
    /// `rows x 4` targets `(v1, v2, v3, p)`; entries with a false mask are 0.
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
    pub sample_index: Vec<usize>,
}

impl OperatorTriplet {
    pub fn empty(m1: usize, m2: usize) -> OperatorTriplet {
        OperatorTriplet { m1, m2, ..Default::default() }
    }

    pub fn rows(&self) -> usize {
        self.sample_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_index.is_empty()
    }

    fn push(&mut self, x: [f64; 3], s1: &[f64], s2: &[f64], target: [Option<f64>; 4], sample: usize) {
        self.coordinates.extend_from_slice(&x);
        self.sensors1.extend_from_slice(s1);
        self.sensors2.extend_from_slice(s2);
        for t in target {
            self.targets.push(t.unwrap_or(0.0));
            self.mask.push(t.is_some());
        }
        self.sample_index.push(sample);
    }

    /// Checks the shared row count and that rows of one instance carry
    /// bit-identical sensor rows.
    pub fn validate(&self) -> Result<()> {
        let n = self.rows();
        let checks = [
            ("coordinates", self.coordinates.len(), 3 * n),
            ("sensors1", self.sensors1.len(), self.m1 * n),
            ("sensors2", self.sensors2.len(), self.m2 * n),
            ("targets", self.targets.len(), 4 * n),
            ("mask", self.mask.len(), 4 * n),
        ];
        let mut problems: Vec<String> = checks
            .iter()
            .filter(|(_, got, want)| got != want)
            .map(|(name, got, want)| format!("{name} has {got} entries, expected {want}"))
            .collect();
        if problems.is_empty() {
            let mut first: BTreeMap<usize, usize> = BTreeMap::new();
            for (row, &s) in self.sample_index.iter().enumerate() {
                let r0 = *first.entry(s).or_insert(row);
                let same = |a: &[f64], m: usize| {
                    a[r0 * m..(r0 + 1) * m].iter().zip(&a[row * m..(row + 1) * m]).all(|(x, y)| x.to_bits() == y.to_bits())
                };
                if !same(&self.sensors1, self.m1) || !same(&self.sensors2, self.m2) {
                    problems.push(format!("row {row} of instance {s} has different sensor rows"));
                    break;
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Distinct instances in order of first appearance: their sensor rows
    /// and, per row, the position of its instance in that table.
    pub fn instance_rows(&self) -> Result<(SensorRows, Vec<usize>)> {
        let mut pos: BTreeMap<usize, usize> = BTreeMap::new();
        let (mut s1, mut s2) = (Vec::new(), Vec::new());
        let mut local = Vec::with_capacity(self.rows());
        for (row, &s) in self.sample_index.iter().enumerate() {
            let next = pos.len();
            let k = *pos.entry(s).or_insert_with(|| {
                s1.extend_from_slice(&self.sensors1[row * self.m1..(row + 1) * self.m1]);
                s2.extend_from_slice(&self.sensors2[row * self.m2..(row + 1) * self.m2]);
                next
            });
            local.push(k);
        }
        Ok((SensorRows::new(self.m1, self.m2, s1, s2)?, local))
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let write = |name: &str, header: Vec<String>, width: usize, cell: &dyn Fn(usize, usize) -> String| -> Result<()> {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(&header)?;
            for row in 0..self.rows() {
                w.write_record((0..width).map(|c| cell(row, c)))?;
            }
            w.flush()?;
            Ok(())
        };
        let f = |v: f64| format!("{v:?}");
        write("coordinates.csv", vec!["x1".into(), "x2".into(), "x3".into()], 3, &|r, c| f(self.coordinates[3 * r + c]))?;
        write("sensors1.csv", (0..self.m1).map(|k| format!("s{k}")).collect(), self.m1, &|r, c| {
            f(self.sensors1[self.m1 * r + c])
        })?;
        write("sensors2.csv", (0..self.m2).map(|k| format!("s{k}")).collect(), self.m2, &|r, c| {
            f(self.sensors2[self.m2 * r + c])
        })?;
        write("targets.csv", super::OUTPUT_NAMES.iter().map(|s| s.to_string()).collect(), 4, &|r, c| {
            if self.mask[4 * r + c] {
                f(self.targets[4 * r + c])
            } else {
                String::new()
            }
        })?;
        write("index.csv", vec!["sample".into()], 1, &|r, _| self.sample_index[r].to_string())?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<OperatorTriplet> {
        let read = |name: &str| -> Result<(usize, Vec<Vec<String>>)> {
            let path = dir.join(name);
            let mut rdr = csv::Reader::from_path(&path)?;
            let width = rdr.headers()?.len();
            let mut rows = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                rows.push(rec.iter().map(str::to_string).collect());
            }
            Ok((width, rows))
        };
        let parse = |name: &str, line: usize, s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                path: dir.join(name),
                line,
                message: format!("not a number: {s:?}"),
            })
        };
        let (_, coords) = read("coordinates.csv")?;
        let (m1, s1) = read("sensors1.csv")?;
        let (m2, s2) = read("sensors2.csv")?;
        let (_, targets) = read("targets.csv")?;
        let (_, index) = read("index.csv")?;
        let n = index.len();
        let counts = [coords.len(), s1.len(), s2.len(), targets.len()];
        if counts.iter().any(|&c| c != n) {
            return Err(Error::Validation(vec![format!(
                "row counts differ: coordinates {}, sensors1 {}, sensors2 {}, targets {}, index {n}",
                counts[0], counts[1], counts[2], counts[3]
            )]));
        }
        let mut t = OperatorTriplet::empty(m1, m2);
        for r in 0..n {
            let line = r + 2;
            for c in &coords[r] {
                t.coordinates.push(parse("coordinates.csv", line, c)?);
            }
            for c in &s1[r] {
                t.sensors1.push(parse("sensors1.csv", line, c)?);
            }
            for c in &s2[r] {
                t.sensors2.push(parse("sensors2.csv", line, c)?);
            }
            for c in &targets[r] {
                if c.is_empty() {
                    t.targets.push(0.0);
                    t.mask.push(false);
                } else {
                    t.targets.push(parse("targets.csv", line, c)?);
                    t.mask.push(true);
                }
            }
            t.sample_index.push(index[r][0].parse().map_err(|_| Error::Parse {
                path: dir.join("index.csv"),
                line,
                message: format!("bad sample index {:?}", index[r][0]),
            })?);
        }
        t.validate()?;
        Ok(t)
    }
}

/// Inlet and outlet sensor values of one instance, in `scales`.
pub fn instance_sensors(
    cloud: &StratifiedPointCloud,
    layout: &SensorLayout,
    radius: f64,
    scales: &Scales,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let v_max = cloud.v_max.ok_or_else(|| Error::usage("every cloud needs its maximum inlet velocity"))?;
    let s1 = layout
        .inlet
        .iter()
        .map(|x| Ok(parabolic_inlet(x, v_max, radius)?[1] / scales.velocity))
        .collect::<Result<Vec<f64>>>()?;
    let outlet = cloud.get(Stratum::Outlet);
    let s2 = layout
        .outlet
        .iter()
        .map(|x| {
            if let Some(o) = &cloud.oracle {
                return Ok(o.eval(x)?.1);
            }
            // nearest labelled outlet node
            (0..outlet.len())
                .filter_map(|i| outlet.p[i].map(|p| (i, p)))
                .min_by(|(a, _), (b, _)| {
                    let d = |i: usize| (0..3).map(|k| (outlet.x[i][k] - x[k]).powi(2)).sum::<f64>();
                    d(*a).total_cmp(&d(*b))
                })
                .map(|(_, p)| p)
                .ok_or_else(|| Error::usage("cloud has neither an oracle nor outlet pressure labels"))
        })
        .map(|p: Result<f64>| p.map(|p| scales.pressure(p)))
        .collect::<Result<Vec<f64>>>()?;
    Ok((s1, s2))
}

/// Builds one triplet per stratum (indexed by [`Stratum::index`]) from one
/// cloud per function instance. Coordinates, sensors and targets are
/// expressed in `scales`.
pub fn build_triplets(
    clouds: &[StratifiedPointCloud],
    layout: &SensorLayout,
    scales: &Scales,
) -> Result<[OperatorTriplet; 5]> {
    let first = clouds.first().ok_or_else(|| Error::usage("no clouds given"))?;
    let radius = match (&first.domain, &first.oracle) {
        (Some(d), _) => d.radius,
        (None, Some(o)) => o.params.radius,
        _ => return Err(Error::usage("clouds need a domain or an oracle to place sensors")),
    };
    for (i, c) in clouds.iter().enumerate() {
        if c.domain != first.domain {
            return Err(Error::Validation(vec![format!("cloud {i} has a different geometry than cloud 0")]));
        }
    }
    let (m1, m2) = (layout.inlet.len(), layout.outlet.len());
    let mut out: [OperatorTriplet; 5] = std::array::from_fn(|_| OperatorTriplet::empty(m1, m2));
    for (i, cloud) in clouds.iter().enumerate() {
        let (s1, s2) = instance_sensors(cloud, layout, radius, scales)?;
        for s in Stratum::ALL {
            let set = cloud.get(s);
            let t = &mut out[s.index()];
            for k in 0..set.len() {
                let v = set.v[k].map(|v| scales.velocity(&v));
                let target = [v.map(|v| v[0]), v.map(|v| v[1]), v.map(|v| v[2]), set.p[k].map(|p| scales.pressure(p))];
                t.push(scales.point(&set.x[k]), &s1, &s2, target, i);
            }
        }
    }
    Ok(out)
}
