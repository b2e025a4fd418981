//! Steady incompressible Navier-Stokes residuals, inlet profile, scaling
//! between dimensional and dimensionless frames, and the straight-pipe
//! Poiseuille solution used as ground truth.

use crate::error::{Error, Result};
use crate::nn::jet::{Jets, Order};

/// Blood-analog constants of the idealized aneurysm model.
pub const RHO: f64 = 1060.0;
pub const MU: f64 = 0.00399;
pub const INLET_RADIUS: f64 = 0.010065;
pub const LENGTH: f64 = 0.26009;
/// The eight maximum inlet velocities (m/s) of the reference dataset.
pub const VELOCITIES: [f64; 8] = [0.04, 0.05, 0.06, 0.08, 0.10, 0.12, 0.13, 0.15];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidParams {
    /// Density, kg/m^3.
    pub rho: f64,
    /// Dynamic viscosity, kg/(m s).
    pub mu: f64,
    /// Maximum inlet velocity, m/s.
    pub v_max: f64,
    /// Inlet radius, m.
    pub radius: f64,
    /// Specimen length along x2, m.
    pub length: f64,
}

impl FluidParams {
    pub fn new(rho: f64, mu: f64, v_max: f64, radius: f64, length: f64) -> Result<FluidParams> {
        let p = FluidParams { rho, mu, v_max, radius, length };
        for (name, v) in [("rho", rho), ("mu", mu), ("V", v_max), ("R", radius), ("length", length)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("fluid parameter {name} must be positive and finite, got {v}")));
            }
        }
        Ok(p)
    }

    /// Reference constants with the given maximum inlet velocity.
    pub fn reference(v_max: f64) -> FluidParams {
        FluidParams { rho: RHO, mu: MU, v_max, radius: INLET_RADIUS, length: LENGTH }
    }

    pub fn with_velocity(self, v_max: f64) -> FluidParams {
        FluidParams { v_max, ..self }
    }

    /// Characteristic length D = 2R.
    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn reynolds(&self) -> f64 {
        reynolds(self)
    }

    /// Characteristic pressure rho V^2.
    pub fn pressure_scale(&self) -> f64 {
        self.rho * self.v_max * self.v_max
    }

    /// Convective and viscous coefficients `(a, b)` of the momentum
    /// residual in `frame`.
    pub fn coefficients(&self, frame: Frame) -> (f64, f64) {
        match frame {
            Frame::Dimensional => (self.rho, self.mu),
            Frame::Dimensionless => (1.0, 1.0 / self.reynolds()),
        }
    }
}

pub fn reynolds(params: &FluidParams) -> f64 {
    params.rho * params.diameter() * params.v_max / params.mu
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    Dimensional,
    Dimensionless,
}

impl Frame {
    pub fn name(self) -> &'static str {
        match self {
            Frame::Dimensional => "dimensional",
            Frame::Dimensionless => "dimensionless",
        }
    }
}

/// Values and input derivatives of `(v1, v2, v3, p)` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldJet {
    pub value: [f64; 4],
    /// `grad[k][j] = d out_k / d x_j`
    pub grad: [[f64; 3]; 4],
    /// `second[k][j] = d^2 out_k / d x_j^2`
    pub second: [[f64; 3]; 4],
    pub frame: Frame,
}

impl FieldJet {
    pub fn zero(frame: Frame) -> FieldJet {
        FieldJet { value: [0.0; 4], grad: [[0.0; 3]; 4], second: [[0.0; 3]; 4], frame }
    }

    /// Reads point `i` of a second-order, 3-direction, 4-output batch.
    pub fn from_jets(jets: &Jets, i: usize, frame: Frame) -> Result<FieldJet> {
        check_field_jets(jets)?;
        let mut f = FieldJet::zero(frame);
        for k in 0..4 {
            f.value[k] = jets.value(i, k);
            for j in 0..3 {
                f.grad[k][j] = jets.first(j, i, k);
                f.second[k][j] = jets.second(j, i, k);
            }
        }
        Ok(f)
    }

    /// Writes this jet into point `i` of a batch laid out like
    /// [`FieldJet::from_jets`] reads.
    pub fn write_to(&self, jets: &mut Jets, i: usize) -> Result<()> {
        check_field_jets(jets)?;
        for k in 0..4 {
            *jets.value_mut(i, k) = self.value[k];
            for j in 0..3 {
                *jets.first_mut(j, i, k) = self.grad[k][j];
                *jets.second_mut(j, i, k) = self.second[k][j];
            }
        }
        Ok(())
    }
}

fn check_field_jets(jets: &Jets) -> Result<()> {
    if jets.order() != Order::Second || jets.dirs() != 3 || jets.width() != 4 {
        return Err(Error::usage(format!(
            "field jets need second order, 3 directions and 4 outputs (got {:?}, {}, {})",
            jets.order(),
            jets.dirs(),
            jets.width()
        )));
    }
    Ok(())
}

/// The three momentum residuals and the continuity residual of the steady
/// incompressible equations at one point.
pub fn nse_residual(field: &FieldJet, params: &FluidParams, frame: Frame) -> Result<[f64; 4]> {
    if field.frame != frame {
        return Err(Error::usage(format!(
            "field is {} but the residual was requested in the {} frame",
            field.frame.name(),
            frame.name()
        )));
    }
    let (a, b) = params.coefficients(frame);
    Ok(residual_with(field, a, b))
}

/// Residual with explicit convective coefficient `a` and viscous
/// coefficient `b`.
pub fn residual_with(f: &FieldJet, a: f64, b: f64) -> [f64; 4] {
    let v = &f.value;
    let mut e = [0.0; 4];
    for i in 0..3 {
        let convection: f64 = (0..3).map(|j| v[j] * f.grad[i][j]).sum();
        let laplacian: f64 = f.second[i].iter().sum();
        e[i] = a * convection + f.grad[3][i] - b * laplacian;
    }
    e[3] = f.grad[0][0] + f.grad[1][1] + f.grad[2][2];
    e
}

/// Pulls the residual adjoint `e_adj` back onto the field jet.
pub fn residual_adjoint(f: &FieldJet, a: f64, b: f64, e_adj: [f64; 4]) -> FieldJet {
    let mut adj = FieldJet::zero(f.frame);
    for i in 0..3 {
        let ei = e_adj[i];
        for j in 0..3 {
            adj.value[j] += a * ei * f.grad[i][j];
            adj.grad[i][j] += a * ei * f.value[j];
            adj.second[i][j] -= b * ei;
        }
        adj.grad[3][i] += ei;
    }
    for i in 0..3 {
        adj.grad[i][i] += e_adj[3];
    }
    adj
}

fn radial(x: &[f64; 3]) -> f64 {
    (x[0] * x[0] + x[2] * x[2]).sqrt()
}

/// Slack for points generated exactly on a boundary.
const ON_BOUNDARY: f64 = 1e-12;

/// Parabolic inlet velocity `(0, V (1 - r^2/R^2), 0)`.
pub fn parabolic_inlet(x: &[f64; 3], v_max: f64, radius: f64) -> Result<[f64; 3]> {
    let r = radial(x);
    if r > radius * (1.0 + ON_BOUNDARY) {
        return Err(Error::OutsideDomain { point: *x, region: "inlet disc" });
    }
    Ok([0.0, v_max * (1.0 - r * r / (radius * radius)), 0.0])
}

/// A set of points with velocity and pressure values in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub points: Vec<[f64; 3]>,
    pub v: Vec<[f64; 3]>,
    pub p: Vec<f64>,
    pub frame: Frame,
}

impl FlowField {
    pub fn new(points: Vec<[f64; 3]>, v: Vec<[f64; 3]>, p: Vec<f64>, frame: Frame) -> Result<FlowField> {
        if v.len() != points.len() || p.len() != points.len() {
            return Err(Error::Dimension { expected: points.len(), got: v.len().max(p.len()), context: "flow field" });
        }
        Ok(FlowField { points, v, p, frame })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nondimensionalize(&self, params: &FluidParams) -> Result<FlowField> {
        if self.frame == Frame::Dimensionless {
            return Err(Error::usage("field is already dimensionless"));
        }
        Ok(self.rescale(1.0 / params.diameter(), 1.0 / params.v_max, 1.0 / params.pressure_scale()))
    }

    pub fn redimensionalize(&self, params: &FluidParams) -> Result<FlowField> {
        if self.frame == Frame::Dimensional {
            return Err(Error::usage("field is already dimensional"));
        }
        Ok(self.rescale(params.diameter(), params.v_max, params.pressure_scale()))
    }

    fn rescale(&self, length: f64, velocity: f64, pressure: f64) -> FlowField {
        let frame = match self.frame {
            Frame::Dimensional => Frame::Dimensionless,
            Frame::Dimensionless => Frame::Dimensional,
        };
        FlowField {
            points: self.points.iter().map(|x| x.map(|c| c * length)).collect(),
            v: self.v.iter().map(|v| v.map(|c| c * velocity)).collect(),
            p: self.p.iter().map(|p| p * pressure).collect(),
            frame,
        }
    }
}

/// Scales a dimensional point into the dimensionless frame.
pub fn nondimensionalize_point(x: &[f64; 3], params: &FluidParams) -> [f64; 3] {
    x.map(|c| c / params.diameter())
}

pub fn redimensionalize_point(x: &[f64; 3], params: &FluidParams) -> [f64; 3] {
    x.map(|c| c * params.diameter())
}

/// Units a model works in: dimensional values are divided by these scales.
/// The identity keeps SI units; the reference scales of some `FluidParams`
/// give the dimensionless frame with `D`, `V` and `rho V^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scales {
    pub frame: Frame,
    pub length: f64,
    pub velocity: f64,
    pub pressure: f64,
    /// Residual coefficients `(a, b)` in this frame.
    pub coefficients: (f64, f64),
}

impl Scales {
    pub fn new(frame: Frame, params: &FluidParams) -> Scales {
        match frame {
            Frame::Dimensional => Scales {
                frame,
                length: 1.0,
                velocity: 1.0,
                pressure: 1.0,
                coefficients: params.coefficients(frame),
            },
            Frame::Dimensionless => Scales {
                frame,
                length: params.diameter(),
                velocity: params.v_max,
                pressure: params.pressure_scale(),
                coefficients: params.coefficients(frame),
            },
        }
    }

    pub fn point(&self, x: &[f64; 3]) -> [f64; 3] {
        x.map(|c| c / self.length)
    }

    pub fn point_back(&self, x: &[f64; 3]) -> [f64; 3] {
        x.map(|c| c * self.length)
    }

    pub fn velocity(&self, v: &[f64; 3]) -> [f64; 3] {
        v.map(|c| c / self.velocity)
    }

    pub fn pressure(&self, p: f64) -> f64 {
        p / self.pressure
    }

    /// Maps a model output `(v1, v2, v3, p)` back to SI units.
    pub fn output_back(&self, out: &[f64]) -> [f64; 4] {
        [out[0] * self.velocity, out[1] * self.velocity, out[2] * self.velocity, out[3] * self.pressure]
    }
}

/// Fully developed laminar flow in a straight pipe of radius `params.radius`
/// and length `params.length` along x2, with a gauge pressure `p_out` (Pa)
/// at the outlet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoiseuilleOracle {
    pub params: FluidParams,
    pub p_out: f64,
}

impl PoiseuilleOracle {
    pub fn new(params: FluidParams, p_out: f64) -> PoiseuilleOracle {
        PoiseuilleOracle { params, p_out }
    }

    /// Axial pressure gradient magnitude 4 mu V / R^2 (Pa/m).
    pub fn pressure_gradient(&self) -> f64 {
        4.0 * self.params.mu * self.params.v_max / (self.params.radius * self.params.radius)
    }

    /// Total pressure drop from inlet to outlet (Pa).
    pub fn pressure_drop(&self) -> f64 {
        self.pressure_gradient() * self.params.length
    }

    fn check(&self, x: &[f64; 3], radius: f64, length: f64) -> Result<()> {
        let inside = radial(x) <= radius * (1.0 + ON_BOUNDARY)
            && x[1] >= -ON_BOUNDARY * length
            && x[1] <= length * (1.0 + ON_BOUNDARY);
        if inside {
            Ok(())
        } else {
            Err(Error::OutsideDomain { point: *x, region: "straight pipe" })
        }
    }

    /// Velocity and pressure at a dimensional point.
    pub fn eval(&self, x: &[f64; 3]) -> Result<([f64; 3], f64)> {
        let jet = self.jet(x, Frame::Dimensional)?;
        Ok(([jet.value[0], jet.value[1], jet.value[2]], jet.value[3]))
    }

    /// Exact field jet at `x`, where `x` is expressed in `frame`.
    pub fn jet(&self, x: &[f64; 3], frame: Frame) -> Result<FieldJet> {
        let p = &self.params;
        // (velocity scale, radius, length, pressure gradient, outlet pressure)
        let (v, r, len, g, p_out) = match frame {
            Frame::Dimensional => (p.v_max, p.radius, p.length, self.pressure_gradient(), self.p_out),
            Frame::Dimensionless => {
                let d = p.diameter();
                (1.0, p.radius / d, p.length / d, 16.0 / p.reynolds(), self.p_out / p.pressure_scale())
            }
        };
        self.check(x, r, len)?;
        let r2 = r * r;
        let mut f = FieldJet::zero(frame);
        f.value[1] = v * (1.0 - (x[0] * x[0] + x[2] * x[2]) / r2);
        f.value[3] = p_out + g * (len - x[1]);
        f.grad[1][0] = -2.0 * v * x[0] / r2;
        f.grad[1][2] = -2.0 * v * x[2] / r2;
        f.grad[3][1] = -g;
        f.second[1][0] = -2.0 * v / r2;
        f.second[1][2] = -2.0 * v / r2;
        Ok(f)
    }
}
