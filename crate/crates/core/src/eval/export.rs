use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use super::FieldModel;
use crate::error::{Error, Result};
use crate::geometry::CSV_HEADER;
use crate::physics::FlowField;

pub const VTK_MAGIC: &str = "# vtk DataFile Version 3.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    VtkLegacy,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<ExportFormat> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "vtk" | "vtk-legacy" => Ok(ExportFormat::VtkLegacy),
            _ => Err(Error::config(format!("unknown export format {s:?} (csv or vtk)"))),
        }
    }
}

/// Writes the predicted field at `points`. With a reference field over the
/// same points, absolute errors are added. The CSV form uses the point-cloud
/// columns with the data stratum, so it can be ingested again.
pub fn export_field(
    model: &dyn FieldModel,
    points: &[[f64; 3]],
    truth: Option<&FlowField>,
    format: ExportFormat,
    path: &Path,
) -> Result<()> {
    if let Some(t) = truth {
        if t.points.len() != points.len() {
            return Err(Error::Dimension { expected: points.len(), got: t.points.len(), context: "reference points" });
        }
    }
    let pred = model.predict_si(points)?;
    let errors: Option<Vec<[f64; 4]>> = truth.map(|t| {
        pred.iter()
            .enumerate()
            .map(|(i, o)| {
                let v = t.v[i];
                [(o[0] - v[0]).abs(), (o[1] - v[1]).abs(), (o[2] - v[2]).abs(), (o[3] - t.p[i]).abs()]
            })
            .collect()
    });
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        ExportFormat::Csv => {
            write!(w, "{}", CSV_HEADER.join(","))?;
            if errors.is_some() {
                write!(w, ",err_v1,err_v2,err_v3,err_p")?;
            }
            writeln!(w)?;
            for (i, (x, o)) in points.iter().zip(&pred).enumerate() {
                write!(w, "{:?},{:?},{:?},{:?},{:?},{:?},{:?},data", x[0], x[1], x[2], o[0], o[1], o[2], o[3])?;
                if let Some(e) = &errors {
                    write!(w, ",{:?},{:?},{:?},{:?}", e[i][0], e[i][1], e[i][2], e[i][3])?;
                }
                writeln!(w)?;
            }
        }
        ExportFormat::VtkLegacy => {
            let n = points.len();
            writeln!(w, "{VTK_MAGIC}\npredicted flow field\nASCII\nDATASET POLYDATA")?;
            writeln!(w, "POINTS {n} double")?;
            for x in points {
                writeln!(w, "{:?} {:?} {:?}", x[0], x[1], x[2])?;
            }
            writeln!(w, "VERTICES {n} {}", 2 * n)?;
            for i in 0..n {
                writeln!(w, "1 {i}")?;
            }
            writeln!(w, "POINT_DATA {n}\nVECTORS velocity double")?;
            for o in &pred {
                writeln!(w, "{:?} {:?} {:?}", o[0], o[1], o[2])?;
            }
            writeln!(w, "SCALARS pressure double 1\nLOOKUP_TABLE default")?;
            for o in &pred {
                writeln!(w, "{:?}", o[3])?;
            }
            if let Some(e) = &errors {
                writeln!(w, "VECTORS velocity_error double")?;
                for e in e {
                    writeln!(w, "{:?} {:?} {:?}", e[0], e[1], e[2])?;
                }
                writeln!(w, "SCALARS pressure_error double 1\nLOOKUP_TABLE default")?;
                for e in e {
                    writeln!(w, "{:?}", e[3])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
