//! Domains, stratified point clouds and dataset preparation.
//!
//! Coordinates are always stored in metres with the inlet centre at the
//! origin and the main flow along x2. Labels are optional per point, so a
//! missing pressure is `None` rather than a sentinel value.

mod io;
mod scenario;

pub use io::{read_csv, validate_cloud, write_csv, CSV_HEADER};
pub use scenario::{extract_data_scenario, inject_noise, split, Scenario, SplitFractions};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::physics::{parabolic_inlet, PoiseuilleOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    StraightPipe,
    AaaIdealized,
}

/// Gaussian radial bulge of the idealized aneurysm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bulge {
    /// Bulge centre as a fraction of the length.
    pub center_fraction: f64,
    /// Peak radius over inlet radius.
    pub max_radius_ratio: f64,
    /// Gaussian width in metres.
    pub shape_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub radius: f64,
    pub length: f64,
    pub bulge: Bulge,
}

impl DomainSpec {
    pub fn straight_pipe(radius: f64, length: f64) -> DomainSpec {
        DomainSpec {
            kind: DomainKind::StraightPipe,
            radius,
            length,
            bulge: Bulge { center_fraction: 0.5, max_radius_ratio: 1.0, shape_width: length / 10.0 },
        }
    }

    /// Idealized aneurysm with the default bulge: centred, twice the inlet
    /// radius at its peak, Gaussian width of a tenth of the length.
    pub fn aaa(radius: f64, length: f64) -> DomainSpec {
        DomainSpec {
            kind: DomainKind::AaaIdealized,
            radius,
            length,
            bulge: Bulge { center_fraction: 0.5, max_radius_ratio: 2.0, shape_width: length / 10.0 },
        }
    }

    pub fn with_bulge(mut self, bulge: Bulge) -> DomainSpec {
        self.bulge = bulge;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.length > 0.0 && self.radius.is_finite() && self.length.is_finite()) {
            return Err(Error::config("domain radius and length must be positive"));
        }
        if self.kind == DomainKind::AaaIdealized {
            let b = &self.bulge;
            if !(0.0..=1.0).contains(&b.center_fraction) {
                return Err(Error::config("bulge center-fraction must lie in [0, 1]"));
            }
            if !(b.max_radius_ratio >= 1.0 && b.max_radius_ratio.is_finite()) {
                return Err(Error::config("bulge max-radius-ratio must be at least 1"));
            }
            if !(b.shape_width > 0.0 && b.shape_width.is_finite()) {
                return Err(Error::config("bulge shape-width must be positive"));
            }
        }
        Ok(())
    }

    fn bulge_terms(&self, x2: f64) -> (f64, f64) {
        let b = &self.bulge;
        let c = b.center_fraction * self.length;
        let w = b.shape_width;
        let amp = (b.max_radius_ratio - 1.0) * self.radius;
        let g = amp * (-(x2 - c) * (x2 - c) / (2.0 * w * w)).exp();
        (g, -g * (x2 - c) / (w * w))
    }

    fn check_x2(&self, x2: f64) -> Result<()> {
        let slack = 1e-12 * self.length;
        if x2 < -slack || x2 > self.length + slack || x2.is_nan() {
            return Err(Error::OutsideDomain { point: [0.0, x2, 0.0], region: "domain length" });
        }
        Ok(())
    }

    /// Wall radius at axial position `x2`.
    pub fn radius_profile(&self, x2: f64) -> Result<f64> {
        self.check_x2(x2)?;
        Ok(match self.kind {
            DomainKind::StraightPipe => self.radius,
            DomainKind::AaaIdealized => self.radius + self.bulge_terms(x2).0,
        })
    }

    /// `d rho / d x2` of the wall profile.
    pub fn radius_slope(&self, x2: f64) -> Result<f64> {
        self.check_x2(x2)?;
        Ok(match self.kind {
            DomainKind::StraightPipe => 0.0,
            DomainKind::AaaIdealized => self.bulge_terms(x2).1,
        })
    }

    /// Largest wall radius over the length.
    pub fn max_radius(&self) -> f64 {
        match self.kind {
            DomainKind::StraightPipe => self.radius,
            DomainKind::AaaIdealized => {
                let c = (self.bulge.center_fraction * self.length).clamp(0.0, self.length);
                self.radius + self.bulge_terms(c).0
            }
        }
    }

    /// Axis-aligned bounding box `(lo, hi)`.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let r = self.max_radius();
        ([-r, 0.0, -r], [r, self.length, r])
    }

    /// True when `x` lies strictly inside the lumen.
    pub fn is_interior(&self, x: &[f64; 3]) -> bool {
        if !(x[1] > 0.0 && x[1] < self.length) {
            return false;
        }
        let rho = self.radius_profile(x[1]).expect("x2 checked above");
        x[0] * x[0] + x[2] * x[2] < rho * rho
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stratum {
    Inlet,
    Wall,
    Outlet,
    Volume,
    Data,
}

impl Stratum {
    pub const ALL: [Stratum; 5] = [Stratum::Inlet, Stratum::Wall, Stratum::Outlet, Stratum::Volume, Stratum::Data];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Inlet => "inlet",
            Stratum::Wall => "wall",
            Stratum::Outlet => "outlet",
            Stratum::Volume => "volume",
            Stratum::Data => "data",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stratum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stratum> {
        Stratum::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stratum {s:?}")))
    }
}

/// Points of one stratum with optional labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    pub x: Vec<[f64; 3]>,
    pub v: Vec<Option<[f64; 3]>>,
    pub p: Vec<Option<f64>>,
}

impl PointSet {
    pub fn with_capacity(n: usize) -> PointSet {
        PointSet { x: Vec::with_capacity(n), v: Vec::with_capacity(n), p: Vec::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn push(&mut self, x: [f64; 3], v: Option<[f64; 3]>, p: Option<f64>) {
        self.x.push(x);
        self.v.push(v);
        self.p.push(p);
    }

    /// Subset in the given index order.
    pub fn select(&self, idx: &[usize]) -> PointSet {
        PointSet {
            x: idx.iter().map(|&i| self.x[i]).collect(),
            v: idx.iter().map(|&i| self.v[i]).collect(),
            p: idx.iter().map(|&i| self.p[i]).collect(),
        }
    }

    pub fn extend(&mut self, other: &PointSet) {
        self.x.extend_from_slice(&other.x);
        self.v.extend_from_slice(&other.v);
        self.p.extend_from_slice(&other.p);
    }

    /// Row-major `n x 3` coordinates.
    pub fn coords_flat(&self) -> Vec<f64> {
        self.x.iter().flat_map(|x| x.iter().copied()).collect()
    }

    pub fn has_velocity(&self) -> bool {
        !self.is_empty() && self.v.iter().all(Option::is_some)
    }

    pub fn has_pressure(&self) -> bool {
        !self.is_empty() && self.p.iter().all(Option::is_some)
    }
}

/// Number of points to draw per stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StratumCounts {
    pub inlet: usize,
    pub wall: usize,
    pub outlet: usize,
    pub volume: usize,
}

impl StratumCounts {
    pub fn new(inlet: usize, wall: usize, outlet: usize, volume: usize) -> StratumCounts {
        StratumCounts { inlet, wall, outlet, volume }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct StratifiedPointCloud {
    strata: [PointSet; 5],
    /// Maximum inlet velocity the labels correspond to.
    pub v_max: Option<f64>,
    /// Analytic ground truth, when the cloud was generated in a straight
    /// pipe.
    pub oracle: Option<PoiseuilleOracle>,
    pub domain: Option<DomainSpec>,
}


impl StratifiedPointCloud {
    pub fn get(&self, s: Stratum) -> &PointSet {
        &self.strata[s.index()]
    }

    pub fn get_mut(&mut self, s: Stratum) -> &mut PointSet {
        &mut self.strata[s.index()]
    }

    pub fn set(&mut self, s: Stratum, points: PointSet) {
        self.strata[s.index()] = points;
    }

    pub fn len(&self) -> usize {
        self.strata.iter().map(PointSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ground-truth labels at `x`: the attached oracle when present.
    pub fn truth(&self, x: &[f64; 3]) -> Option<([f64; 3], f64)> {
        self.oracle.and_then(|o| o.eval(x).ok())
    }

    /// Outlet gauge pressure the cloud was generated with, or the mean of
    /// the labelled outlet pressures of an ingested cloud.
    pub fn outlet_pressure(&self) -> Option<f64> {
        if let Some(o) = &self.oracle {
            return Some(o.p_out);
        }
        let labelled: Vec<f64> = self.get(Stratum::Outlet).p.iter().flatten().copied().collect();
        (!labelled.is_empty()).then(|| labelled.iter().sum::<f64>() / labelled.len() as f64)
    }

    /// All coordinates of the inlet, wall, outlet and volume strata, the
    /// pool collocation points are drawn from.
    pub fn collocation_pool(&self) -> Vec<[f64; 3]> {
        [Stratum::Inlet, Stratum::Wall, Stratum::Outlet, Stratum::Volume]
            .iter()
            .flat_map(|&s| self.get(s).x.iter().copied())
            .collect()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Area-uniform point on a disc of radius `r` in the plane `x2`.
fn disc_point(rng: &mut ChaCha8Rng, r: f64, x2: f64) -> [f64; 3] {
    let rad = r * rng.random::<f64>().sqrt();
    let theta = 2.0 * PI * rng.random::<f64>();
    [rad * theta.cos(), x2, rad * theta.sin()]
}

/// Uniform samples of every boundary and the interior of `spec`, without
/// labels. Each stratum draws from its own random stream.
pub fn sample_domain(spec: &DomainSpec, counts: StratumCounts, seed: u64) -> Result<StratifiedPointCloud> {
    spec.validate()?;
    let mut cloud = StratifiedPointCloud { domain: Some(*spec), ..Default::default() };

    let mut rng = stream_rng(seed, 1);
    let inlet = cloud.get_mut(Stratum::Inlet);
    for _ in 0..counts.inlet {
        inlet.push(disc_point(&mut rng, spec.radius, 0.0), None, None);
    }

    let mut rng = stream_rng(seed, 2);
    let r_out = spec.radius_profile(spec.length)?;
    let outlet = cloud.get_mut(Stratum::Outlet);
    for _ in 0..counts.outlet {
        outlet.push(disc_point(&mut rng, r_out, spec.length), None, None);
    }

    // area element of the revolved profile: rho * sqrt(1 + rho'^2) dx2 dtheta
    let mut rng = stream_rng(seed, 3);
    let weight = |x2: f64| -> f64 {
        let rho = spec.radius_profile(x2).expect("x2 in range");
        let slope = spec.radius_slope(x2).expect("x2 in range");
        rho * (1.0 + slope * slope).sqrt()
    };
    let grid = 4096;
    let w_max = (0..=grid).map(|i| weight(spec.length * i as f64 / grid as f64)).fold(0.0, f64::max) * 1.01;
    let wall = cloud.get_mut(Stratum::Wall);
    while wall.len() < counts.wall {
        let x2 = spec.length * rng.random::<f64>();
        if rng.random::<f64>() * w_max > weight(x2) {
            continue;
        }
        let rho = spec.radius_profile(x2)?;
        let theta = 2.0 * PI * rng.random::<f64>();
        wall.push([rho * theta.cos(), x2, rho * theta.sin()], None, None);
    }

    let mut rng = stream_rng(seed, 4);
    let r_max = spec.max_radius();
    let volume = cloud.get_mut(Stratum::Volume);
    while volume.len() < counts.volume {
        let x = [
            rng.random_range(-r_max..r_max),
            spec.length * rng.random::<f64>(),
            rng.random_range(-r_max..r_max),
        ];
        if spec.is_interior(&x) {
            volume.push(x, None, None);
        }
    }
    Ok(cloud)
}

/// Attaches boundary labels: the parabolic profile at the inlet, no-slip
/// zeros at the wall and, when an oracle is given, its velocity at the
/// outlet. Pressures stay missing on every boundary.
pub fn attach_boundary_labels(
    cloud: &mut StratifiedPointCloud,
    v_max: f64,
    oracle: Option<PoiseuilleOracle>,
) -> Result<()> {
    let radius = match (&cloud.domain, &oracle) {
        (Some(d), _) => d.radius,
        (None, Some(o)) => o.params.radius,
        (None, None) => return Err(Error::usage("boundary labels need a domain or an oracle")),
    };
    let inlet = cloud.get_mut(Stratum::Inlet);
    for i in 0..inlet.len() {
        inlet.v[i] = Some(parabolic_inlet(&inlet.x[i], v_max, radius)?);
        inlet.p[i] = None;
    }
    let wall = cloud.get_mut(Stratum::Wall);
    wall.v.iter_mut().for_each(|v| *v = Some([0.0; 3]));
    wall.p.iter_mut().for_each(|p| *p = None);
    let outlet = cloud.get_mut(Stratum::Outlet);
    for i in 0..outlet.len() {
        outlet.v[i] = match &oracle {
            Some(o) => Some(o.eval(&outlet.x[i])?.0),
            None => None,
        };
        outlet.p[i] = None;
    }
    cloud.v_max = Some(v_max);
    cloud.oracle = oracle;
    Ok(())
}

/// Straight-pipe cloud with boundary labels and the Poiseuille oracle
/// attached.
pub fn generate_pipe_cloud(oracle: PoiseuilleOracle, counts: StratumCounts, seed: u64) -> Result<StratifiedPointCloud> {
    let spec = DomainSpec::straight_pipe(oracle.params.radius, oracle.params.length);
    let mut cloud = sample_domain(&spec, counts, seed)?;
    attach_boundary_labels(&mut cloud, oracle.params.v_max, Some(oracle))?;
    Ok(cloud)
}

#[cfg(test)]
mod tests;
