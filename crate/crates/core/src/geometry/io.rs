use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{DomainSpec, PointSet, Stratum, StratifiedPointCloud};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 8] = ["x1", "x2", "x3", "v1", "v2", "v3", "p", "stratum"];

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

/// Writes every stratum in the point-cloud CSV format. Floats use the
/// shortest round-tripping representation, so ingesting the file again
/// gives back the same bits.
pub fn write_csv(cloud: &StratifiedPointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", CSV_HEADER.join(","))?;
    for s in Stratum::ALL {
        let set = cloud.get(s);
        for i in 0..set.len() {
            let x = set.x[i];
            let v = set.v[i];
            writeln!(
                w,
                "{:?},{:?},{:?},{},{},{},{},{}",
                x[0],
                x[1],
                x[2],
                cell(v.map(|v| v[0])),
                cell(v.map(|v| v[1])),
                cell(v.map(|v| v[2])),
                cell(set.p[i]),
                s.name()
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a point-cloud CSV. Malformed rows fail with their line number;
/// rows that parse but break a stratum rule are collected into a single
/// validation error. When `domain` is given, coordinates are also checked
/// against the geometry.
pub fn read_csv(path: &Path, domain: Option<&DomainSpec>) -> Result<StratifiedPointCloud> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };

    let headers = rdr.headers()?.clone();
    // trailing extra columns (such as exported error columns) are ignored
    if headers.len() < CSV_HEADER.len() || headers.iter().take(CSV_HEADER.len()).collect::<Vec<_>>() != CSV_HEADER {
        return Err(parse_err(1, format!("expected header {}", CSV_HEADER.join(","))));
    }

    let mut cloud = StratifiedPointCloud { domain: domain.copied(), ..Default::default() };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != headers.len() {
            return Err(parse_err(line, format!("expected {} fields, got {}", headers.len(), rec.len())));
        }
        let num = |k: usize| -> Result<Option<f64>> {
            let s = &rec[k];
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| parse_err(line, format!("column {} is not a number: {s:?}", CSV_HEADER[k])))
        };
        let mut x = [0.0; 3];
        for (k, xk) in x.iter_mut().enumerate() {
            *xk = num(k)?.ok_or_else(|| parse_err(line, format!("missing coordinate {}", CSV_HEADER[k])))?;
        }
        let v = match (num(3)?, num(4)?, num(5)?) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            (None, None, None) => None,
            _ => return Err(parse_err(line, "velocity must be given for all three components or none".into())),
        };
        let p = num(6)?;
        let stratum: Stratum = rec[7].parse().map_err(|e: Error| parse_err(line, e.to_string()))?;
        cloud.get_mut(stratum).push(x, v, p);
    }

    let problems = validate_cloud(&cloud);
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(cloud)
}

/// Stratum rules of a cloud. Labels: wall velocities are exactly zero and
/// data points carry every label. Coordinates are checked against the
/// attached domain, if any.
pub fn validate_cloud(cloud: &StratifiedPointCloud) -> Vec<String> {
    let mut problems = Vec::new();
    for s in Stratum::ALL {
        let set = cloud.get(s);
        for (i, x) in set.x.iter().enumerate() {
            if !x.iter().all(|c| c.is_finite()) {
                problems.push(format!("{s} point {i} has non-finite coordinates"));
            }
        }
    }
    let wall = cloud.get(Stratum::Wall);
    for (i, v) in wall.v.iter().enumerate() {
        if let Some(v) = v {
            if v.iter().any(|&c| c != 0.0) {
                problems.push(format!("wall point {i} has non-zero velocity {v:?}"));
            }
        }
    }
    let data = cloud.get(Stratum::Data);
    for i in 0..data.len() {
        if data.v[i].is_none() || data.p[i].is_none() {
            problems.push(format!("data point {i} is missing labels"));
        }
    }
    if let Some(d) = &cloud.domain {
        problems.extend(geometry_problems(cloud, d));
    }
    problems
}

fn geometry_problems(cloud: &StratifiedPointCloud, d: &DomainSpec) -> Vec<String> {
    let mut problems = Vec::new();
    let tol = 1e-9;
    let r = |x: &[f64; 3]| x[0].hypot(x[2]);
    let mut check = |s: Stratum, ok: &dyn Fn(&[f64; 3]) -> bool| {
        let set: &PointSet = cloud.get(s);
        if let Some(i) = set.x.iter().position(|x| !ok(x)) {
            problems.push(format!("{s} point {i} at {:?} violates the {s} geometry", set.x[i]));
        }
    };
    check(Stratum::Inlet, &|x| x[1].abs() <= tol && r(x) <= d.radius * (1.0 + tol));
    check(Stratum::Outlet, &|x| {
        (x[1] - d.length).abs() <= tol && r(x) <= d.radius_profile(d.length).unwrap_or(d.radius) * (1.0 + tol)
    });
    check(Stratum::Wall, &|x| match d.radius_profile(x[1]) {
        Ok(rho) => (r(x) - rho).abs() <= tol,
        Err(_) => false,
    });
    check(Stratum::Volume, &|x| d.is_interior(x));
    problems
}
