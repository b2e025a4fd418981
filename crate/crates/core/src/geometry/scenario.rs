use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{stream_rng, PointSet, Stratum, StratifiedPointCloud};
use crate::error::{Error, Result};

/// How the labelled data stratum is drawn from the volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    /// Slabs `|x2 - s_i| <= tol` at `slices` equally spaced interior stations.
    CrossSection { slices: usize },
    /// Slabs `|x3 - s_i| <= tol`; a single slice is the plane `x3 = 0`.
    Longitudinal { slices: usize },
    Random { fraction: f64 },
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::CrossSection { .. } => "cross-section",
            Scenario::Longitudinal { .. } => "longitudinal",
            Scenario::Random { .. } => "random",
        }
    }

    /// Default half-width of a slice: 1% of the length across the flow, 5%
    /// of the inlet radius along it.
    pub fn default_tolerance(&self, radius: f64, length: f64) -> f64 {
        match self {
            Scenario::CrossSection { .. } => 0.01 * length,
            Scenario::Longitudinal { .. } => 0.05 * radius,
            Scenario::Random { .. } => 0.0,
        }
    }
}

fn geometry_scale(cloud: &StratifiedPointCloud) -> (f64, f64) {
    if let Some(d) = &cloud.domain {
        return (d.radius, d.length);
    }
    let vol = cloud.get(Stratum::Volume);
    let (mut lo, mut hi, mut r) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for x in &vol.x {
        lo = lo.min(x[1]);
        hi = hi.max(x[1]);
        r = r.max(x[0].abs()).max(x[2].abs());
    }
    (r, hi - lo)
}

/// Selects volume points for the data stratum and labels them from the
/// volume's own labels or, failing that, the attached oracle. `tolerance`
/// defaults per [`Scenario::default_tolerance`].
pub fn extract_data_scenario(
    cloud: &StratifiedPointCloud,
    scenario: Scenario,
    tolerance: Option<f64>,
    seed: u64,
) -> Result<PointSet> {
    let vol = cloud.get(Stratum::Volume);
    if vol.is_empty() {
        return Err(Error::DegenerateScenario("volume stratum is empty".into()));
    }
    let (radius, length) = geometry_scale(cloud);
    let tol = tolerance.unwrap_or_else(|| scenario.default_tolerance(radius, length));
    let x2_lo = vol.x.iter().map(|x| x[1]).fold(f64::INFINITY, f64::min).min(0.0);

    let picked: Vec<usize> = match scenario {
        Scenario::CrossSection { slices } | Scenario::Longitudinal { slices } if slices == 0 => {
            return Err(Error::config("a slice scenario needs at least one slice"));
        }
        Scenario::CrossSection { slices } => {
            let stations: Vec<f64> =
                (1..=slices).map(|i| x2_lo + length * i as f64 / (slices + 1) as f64).collect();
            (0..vol.len())
                .filter(|&i| stations.iter().any(|s| (vol.x[i][1] - s).abs() <= tol))
                .collect()
        }
        Scenario::Longitudinal { slices } => {
            let stations: Vec<f64> =
                (0..slices).map(|i| -radius + 2.0 * radius * (i as f64 + 0.5) / slices as f64).collect();
            (0..vol.len())
                .filter(|&i| stations.iter().any(|s| (vol.x[i][2] - s).abs() <= tol))
                .collect()
        }
        Scenario::Random { fraction } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::config(format!("random fraction {fraction} outside [0, 1]")));
            }
            let mut rng = stream_rng(seed, 10);
            (0..vol.len()).filter(|_| rng.random::<f64>() < fraction).collect()
        }
    };
    if picked.is_empty() {
        return Err(Error::DegenerateScenario(format!("{} scenario selected no points", scenario.name())));
    }

    let mut data = PointSet::with_capacity(picked.len());
    for &i in &picked {
        let x = vol.x[i];
        let (v, p) = match (vol.v[i], vol.p[i]) {
            (Some(v), Some(p)) => (v, p),
            _ => cloud.truth(&x).ok_or_else(|| {
                Error::DegenerateScenario("selected point has no labels and the cloud has no oracle".into())
            })?,
        };
        data.push(x, Some(v), Some(p));
    }
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const DEFAULT: SplitFractions = SplitFractions { train: 0.68, val: 0.02, test: 0.30 };

    pub fn new(train: f64, val: f64, test: f64) -> Result<SplitFractions> {
        let f = SplitFractions { train, val, test };
        for (name, v) in [("train", train), ("val", val), ("test", test)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} fraction {v} outside [0, 1]")));
            }
        }
        if ((train + val + test) - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("split fractions sum to {}, not 1", train + val + test)));
        }
        Ok(f)
    }
}

/// Stratified random partition into train, validation and test clouds.
/// Every stratum is shuffled independently and cut at rounded fractions;
/// each part keeps the original point order.
pub fn split(
    cloud: &StratifiedPointCloud,
    fractions: SplitFractions,
    seed: u64,
) -> Result<[StratifiedPointCloud; 3]> {
    let fractions = SplitFractions::new(fractions.train, fractions.val, fractions.test)?;
    let empty = StratifiedPointCloud { strata: Default::default(), ..cloud.clone() };
    let mut out = [empty.clone(), empty.clone(), empty];
    for (k, s) in Stratum::ALL.into_iter().enumerate() {
        let set = cloud.get(s);
        let n = set.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(seed, 20 + k as u64));
        let n_train = ((fractions.train * n as f64).round() as usize).min(n);
        let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train);
        let cuts = [0, n_train, n_train + n_val, n];
        for part in 0..3 {
            let mut sel = idx[cuts[part]..cuts[part + 1]].to_vec();
            sel.sort_unstable();
            out[part].set(s, set.select(&sel));
        }
    }
    Ok(out)
}

/// Adds Gaussian noise with `sigma = level * v_max` to every velocity label
/// of the data stratum. Other strata and pressures are untouched. Levels
/// outside `[0, 0.25]` are accepted with a warning.
pub fn inject_noise(cloud: &StratifiedPointCloud, level: f64, v_max: f64, seed: u64) -> Result<StratifiedPointCloud> {
    if !(level.is_finite() && level >= 0.0) || !(v_max.is_finite() && v_max >= 0.0) {
        return Err(Error::config("noise level and maximum velocity must be finite and non-negative"));
    }
    if level > 0.25 {
        log::warn!("noise level {level} is outside the studied range [0, 0.25]");
    }
    let data = cloud.get(Stratum::Data);
    if !data.has_velocity() {
        return Err(Error::usage("noise injection needs a data stratum with velocity labels"));
    }
    let mut out = cloud.clone();
    if level == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, level * v_max).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = stream_rng(seed, 30);
    for v in out.get_mut(Stratum::Data).v.iter_mut().flatten() {
        for c in v.iter_mut() {
            *c += normal.sample(&mut rng);
        }
    }
    Ok(out)
}
