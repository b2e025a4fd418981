use super::*;
use crate::physics::{FluidParams, INLET_RADIUS, LENGTH};

fn pipe() -> DomainSpec {
    DomainSpec::straight_pipe(INLET_RADIUS, LENGTH)
}

fn oracle(v: f64) -> PoiseuilleOracle {
    PoiseuilleOracle::new(FluidParams::reference(v), 0.0)
}

fn r(x: &[f64; 3]) -> f64 {
    x[0].hypot(x[2])
}

#[test]
fn radius_profile_examples() {
    let aaa = DomainSpec::aaa(INLET_RADIUS, LENGTH);
    let tail = aaa.radius_profile(0.0).unwrap();
    // the default Gaussian leaves exp(-12.5) ~ 3.7e-6 of the bulge at the ends
    assert!((tail - INLET_RADIUS).abs() <= 4e-6 * INLET_RADIUS);
    let expected = INLET_RADIUS * (1.0 + (-(0.5f64 * 0.5) / (2.0 * 0.01)).exp());
    assert!((tail - expected).abs() < 1e-18);
    assert_eq!(aaa.radius_profile(LENGTH / 2.0).unwrap(), 2.0 * INLET_RADIUS);
    assert_eq!(aaa.max_radius(), 2.0 * INLET_RADIUS);
    for x2 in [0.0, 0.1, LENGTH] {
        assert_eq!(pipe().radius_profile(x2).unwrap(), INLET_RADIUS);
    }
    assert!(matches!(aaa.radius_profile(-0.01), Err(Error::OutsideDomain { .. })));
    assert!(matches!(aaa.radius_profile(LENGTH * 1.01), Err(Error::OutsideDomain { .. })));
}

#[test]
fn radius_profile_is_c1_and_at_least_r() {
    let aaa = DomainSpec::aaa(INLET_RADIUS, LENGTH);
    let h = 1e-7;
    for i in 1..200 {
        let x2 = LENGTH * i as f64 / 200.0;
        let rho = aaa.radius_profile(x2).unwrap();
        assert!(rho >= INLET_RADIUS);
        let fd = (aaa.radius_profile(x2 + h).unwrap() - aaa.radius_profile(x2 - h).unwrap()) / (2.0 * h);
        let slope = aaa.radius_slope(x2).unwrap();
        assert!((fd - slope).abs() <= 1e-6 * (1.0 + slope.abs()), "{x2}: {fd} vs {slope}");
    }
}

#[test]
fn invalid_specs_rejected() {
    assert!(DomainSpec::straight_pipe(0.0, 1.0).validate().is_err());
    assert!(DomainSpec::straight_pipe(1.0, -1.0).validate().is_err());
    let bad = Bulge { center_fraction: 0.5, max_radius_ratio: 0.5, shape_width: 0.01 };
    assert!(DomainSpec::aaa(0.01, 0.2).with_bulge(bad).validate().is_err());
    let bad = Bulge { center_fraction: 1.5, max_radius_ratio: 2.0, shape_width: 0.01 };
    assert!(sample_domain(&DomainSpec::aaa(0.01, 0.2).with_bulge(bad), StratumCounts::new(1, 1, 1, 1), 0).is_err());
}

#[test]
fn pipe_samples_satisfy_stratum_geometry() {
    let cloud = sample_domain(&pipe(), StratumCounts::new(500, 500, 500, 1000), 3).unwrap();
    assert_eq!(cloud.get(Stratum::Volume).len(), 1000);
    for x in &cloud.get(Stratum::Volume).x {
        assert!(r(x) < INLET_RADIUS && x[1] > 0.0 && x[1] < LENGTH);
    }
    for x in &cloud.get(Stratum::Inlet).x {
        assert!(x[1] == 0.0 && r(x) <= INLET_RADIUS);
    }
    for x in &cloud.get(Stratum::Outlet).x {
        assert!(x[1] == LENGTH && r(x) <= INLET_RADIUS);
    }
    for x in &cloud.get(Stratum::Wall).x {
        assert!((r(x) - INLET_RADIUS).abs() <= 1e-9);
    }
    assert!(validate_cloud(&cloud).is_empty());
}

#[test]
fn aaa_wall_reaches_bulge_peak() {
    let aaa = DomainSpec::aaa(INLET_RADIUS, LENGTH);
    let cloud = sample_domain(&aaa, StratumCounts::new(10, 5000, 10, 2000), 9).unwrap();
    let max = cloud.get(Stratum::Wall).x.iter().map(r).fold(0.0, f64::max);
    assert!(max >= 1.95 * INLET_RADIUS && max <= 2.0 * INLET_RADIUS, "{max}");
    assert!(validate_cloud(&cloud).is_empty());
}

#[test]
fn wall_sampling_is_area_weighted() {
    // Share of wall points in the middle fifth should match the share of the
    // revolved surface area there, computed by a fine midpoint rule.
    let aaa = DomainSpec::aaa(INLET_RADIUS, LENGTH);
    let n = 40_000;
    let cloud = sample_domain(&aaa, StratumCounts::new(0, n, 0, 0), 5).unwrap();
    let (a, b) = (0.4 * LENGTH, 0.6 * LENGTH);
    let area = |lo: f64, hi: f64| -> f64 {
        let m = 20_000;
        let h = (hi - lo) / m as f64;
        (0..m)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * h;
                let s = aaa.radius_slope(x).unwrap();
                aaa.radius_profile(x).unwrap() * (1.0 + s * s).sqrt() * h
            })
            .sum()
    };
    let expected = area(a, b) / area(0.0, LENGTH);
    let got = cloud.get(Stratum::Wall).x.iter().filter(|x| x[1] >= a && x[1] < b).count() as f64 / n as f64;
    let sd = (expected * (1.0 - expected) / n as f64).sqrt();
    assert!((got - expected).abs() < 4.0 * sd, "{got} vs {expected}");
}

#[test]
fn disc_sampling_is_area_uniform() {
    let cloud = sample_domain(&pipe(), StratumCounts::new(20_000, 0, 0, 0), 2).unwrap();
    // a quarter of the area lies inside half the radius
    let inner = cloud.get(Stratum::Inlet).x.iter().filter(|x| r(x) < INLET_RADIUS / 2.0).count() as f64 / 20_000.0;
    let sd = (0.25f64 * 0.75 / 20_000.0).sqrt();
    assert!((inner - 0.25).abs() < 4.0 * sd, "{inner}");
}

#[test]
fn sampling_is_deterministic() {
    let counts = StratumCounts::new(50, 50, 50, 100);
    let a = sample_domain(&pipe(), counts, 11).unwrap();
    let b = sample_domain(&pipe(), counts, 11).unwrap();
    let c = sample_domain(&pipe(), counts, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn boundary_labels_follow_rules() {
    let o = oracle(0.1);
    let cloud = generate_pipe_cloud(o, StratumCounts::new(200, 200, 200, 200), 1).unwrap();
    let inlet = cloud.get(Stratum::Inlet);
    for i in 0..inlet.len() {
        let expect = parabolic_inlet(&inlet.x[i], 0.1, INLET_RADIUS).unwrap();
        let got = inlet.v[i].unwrap();
        for k in 0..3 {
            assert!((got[k] - expect[k]).abs() <= 1e-12);
        }
        assert!(inlet.p[i].is_none());
    }
    assert!(cloud.get(Stratum::Wall).v.iter().all(|v| *v == Some([0.0; 3])));
    assert!(cloud.get(Stratum::Wall).p.iter().all(Option::is_none));
    assert!(cloud.get(Stratum::Outlet).has_velocity());
    assert!(cloud.get(Stratum::Outlet).p.iter().all(Option::is_none));
    assert!(cloud.get(Stratum::Volume).v.iter().all(Option::is_none));
    assert_eq!(cloud.v_max, Some(0.1));
    assert_eq!(cloud.outlet_pressure(), Some(0.0));
}

#[test]
fn random_scenario_fraction() {
    let o = oracle(0.1);
    let cloud = generate_pipe_cloud(o, StratumCounts::new(1, 1, 1, 1_000_000), 4).unwrap();
    let data = extract_data_scenario(&cloud, Scenario::Random { fraction: 0.003 }, None, 1).unwrap();
    let sd = (1e6f64 * 0.003 * 0.997).sqrt();
    assert!((data.len() as f64 - 3000.0).abs() < 4.0 * sd, "{}", data.len());
    assert!(data.has_velocity() && data.has_pressure());
    let (v, p) = o.eval(&data.x[0]).unwrap();
    assert_eq!((data.v[0].unwrap(), data.p[0].unwrap()), (v, p));

    let all = extract_data_scenario(&cloud, Scenario::Random { fraction: 1.0 }, None, 1).unwrap();
    assert_eq!(all.x, cloud.get(Stratum::Volume).x);
}

#[test]
fn cross_section_forms_clusters() {
    let cloud = generate_pipe_cloud(oracle(0.1), StratumCounts::new(1, 1, 1, 20_000), 4).unwrap();
    let data = extract_data_scenario(&cloud, Scenario::CrossSection { slices: 5 }, None, 0).unwrap();
    let mut stations: Vec<usize> = data
        .x
        .iter()
        .map(|x| {
            let s = (x[1] / LENGTH * 6.0).round() as usize;
            assert!((x[1] - s as f64 * LENGTH / 6.0).abs() <= 0.01 * LENGTH + 1e-15);
            s
        })
        .collect();
    stations.sort_unstable();
    stations.dedup();
    assert_eq!(stations, vec![1, 2, 3, 4, 5]);
}

#[test]
fn longitudinal_selects_mid_plane() {
    let cloud = generate_pipe_cloud(oracle(0.1), StratumCounts::new(1, 1, 1, 5000), 4).unwrap();
    let data = extract_data_scenario(&cloud, Scenario::Longitudinal { slices: 1 }, None, 0).unwrap();
    assert!(!data.is_empty());
    assert!(data.x.iter().all(|x| x[2].abs() <= 0.05 * INLET_RADIUS));
}

#[test]
fn degenerate_scenarios() {
    let cloud = generate_pipe_cloud(oracle(0.1), StratumCounts::new(1, 1, 1, 10), 4).unwrap();
    let tiny = extract_data_scenario(&cloud, Scenario::CrossSection { slices: 1 }, Some(1e-12), 0);
    assert!(matches!(tiny, Err(Error::DegenerateScenario(_))));
    let empty = StratifiedPointCloud::default();
    assert!(matches!(
        extract_data_scenario(&empty, Scenario::Random { fraction: 1.0 }, None, 0),
        Err(Error::DegenerateScenario(_))
    ));
    // no oracle and no labels
    let bare = sample_domain(&pipe(), StratumCounts::new(1, 1, 1, 10), 0).unwrap();
    assert!(extract_data_scenario(&bare, Scenario::Random { fraction: 1.0 }, None, 0).is_err());
}

#[test]
fn split_sizes_and_partition() {
    let mut cloud = sample_domain(&pipe(), StratumCounts::new(1000, 333, 7, 100_000), 8).unwrap();
    cloud.set(Stratum::Data, cloud.get(Stratum::Inlet).clone());
    let [train, val, test] = split(&cloud, SplitFractions::DEFAULT, 3).unwrap();
    let vol = |c: &StratifiedPointCloud| c.get(Stratum::Volume).len();
    assert_eq!((vol(&train), vol(&val), vol(&test)), (68_000, 2_000, 30_000));
    for s in Stratum::ALL {
        let n = cloud.get(s).len() as f64;
        let sizes = [&train, &val, &test].map(|c| c.get(s).len() as f64);
        for (size, f) in sizes.iter().zip([0.68, 0.02, 0.30]) {
            assert!((size - f * n).abs() <= 1.0, "{s}: {size} vs {}", f * n);
        }
        // union equals the input and the parts are disjoint
        let mut all: Vec<[u64; 3]> = [&train, &val, &test]
            .iter()
            .flat_map(|c| c.get(s).x.iter().map(|x| x.map(f64::to_bits)))
            .collect();
        let mut orig: Vec<[u64; 3]> = cloud.get(s).x.iter().map(|x| x.map(f64::to_bits)).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
    }
}

#[test]
fn split_edge_cases() {
    let cloud = sample_domain(&pipe(), StratumCounts::new(10, 10, 10, 10), 8).unwrap();
    let [train, val, test] = split(&cloud, SplitFractions { train: 1.0, val: 0.0, test: 0.0 }, 1).unwrap();
    assert_eq!(train, cloud);
    assert!(val.is_empty() && test.is_empty());
    assert!(split(&cloud, SplitFractions { train: 0.5, val: 0.2, test: 0.2 }, 1).is_err());
    assert!(split(&cloud, SplitFractions { train: 1.2, val: -0.2, test: 0.0 }, 1).is_err());
    let a = split(&cloud, SplitFractions::DEFAULT, 5).unwrap();
    let b = split(&cloud, SplitFractions::DEFAULT, 5).unwrap();
    assert_eq!(a, b);
}

fn cloud_with_data(n: usize) -> StratifiedPointCloud {
    let mut cloud = generate_pipe_cloud(oracle(0.1), StratumCounts::new(50, 50, 50, n), 4).unwrap();
    let data = extract_data_scenario(&cloud, Scenario::Random { fraction: 1.0 }, None, 0).unwrap();
    cloud.set(Stratum::Data, data);
    cloud
}

#[test]
fn noise_statistics() {
    let clean = cloud_with_data(20_000);
    let noisy = inject_noise(&clean, 0.1, 0.1, 7).unwrap();
    let n = clean.get(Stratum::Data).len();
    for k in 0..3 {
        let d: Vec<f64> = (0..n)
            .map(|i| noisy.get(Stratum::Data).v[i].unwrap()[k] - clean.get(Stratum::Data).v[i].unwrap()[k])
            .collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd - 0.01).abs() <= 0.05 * 0.01, "component {k}: sd {sd}");
        assert!(mean.abs() <= 2.0 * 0.01 / (n as f64).sqrt() * 1.5, "component {k}: mean {mean}");
    }
    assert_eq!(noisy.get(Stratum::Data).p, clean.get(Stratum::Data).p);
    for s in [Stratum::Inlet, Stratum::Wall, Stratum::Outlet, Stratum::Volume] {
        assert_eq!(noisy.get(s), clean.get(s));
    }
}

#[test]
fn noise_edge_cases() {
    let clean = cloud_with_data(100);
    assert_eq!(inject_noise(&clean, 0.0, 0.1, 7).unwrap(), clean);
    // outside the studied range is a warning only
    assert!(inject_noise(&clean, 0.5, 0.1, 7).is_ok());
    assert!(inject_noise(&clean, -0.1, 0.1, 7).is_err());
    let no_data = generate_pipe_cloud(oracle(0.1), StratumCounts::new(5, 5, 5, 5), 4).unwrap();
    assert!(inject_noise(&no_data, 0.1, 0.1, 7).is_err());
}

#[test]
fn csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.csv");
    let cloud = cloud_with_data(300);
    write_csv(&cloud, &path).unwrap();
    let back = read_csv(&path, Some(&pipe())).unwrap();
    for s in Stratum::ALL {
        assert_eq!(back.get(s), cloud.get(s), "{s}");
    }
}

#[test]
fn csv_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    std::fs::write(
        &path,
        "x1,x2,x3,v1,v2,v3,p,stratum\n0,0,0,0,0.1,0,,inlet\n0.01,0.1,0,0,0,0,,wall\n0,0.1,0,1e-2,2.5E-1,0,3.5,data\n",
    )
    .unwrap();
    let cloud = read_csv(&path, None).unwrap();
    assert_eq!(cloud.get(Stratum::Inlet).len(), 1);
    assert_eq!(cloud.get(Stratum::Wall).len(), 1);
    assert_eq!(cloud.get(Stratum::Data).len(), 1);
    assert_eq!(cloud.get(Stratum::Inlet).p[0], None);
    assert_eq!(cloud.get(Stratum::Data).v[0], Some([0.01, 0.25, 0.0]));
}

#[test]
fn csv_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    let write = |body: &str| std::fs::write(&path, format!("x1,x2,x3,v1,v2,v3,p,stratum\n{body}")).unwrap();

    write("0,0.1,0,0.1,0,0,,wall\n");
    match read_csv(&path, None) {
        Err(Error::Validation(msgs)) => assert!(msgs[0].contains("wall")),
        other => panic!("{other:?}"),
    }
    write("0,0,0,0,0.1,0,,inlet\n0,abc,0,,,,,volume\n");
    match read_csv(&path, None) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    write("0,0,0,0,0.1,0,,nowhere\n");
    assert!(matches!(read_csv(&path, None), Err(Error::Parse { line: 2, .. })));
    write("0,0,0,0,,0,,inlet\n");
    assert!(matches!(read_csv(&path, None), Err(Error::Parse { .. })));
    write("0,0.1,0,,,,,data\n");
    assert!(matches!(read_csv(&path, None), Err(Error::Validation(_))));
    // volume point outside the pipe when the domain is known
    write("0.5,0.1,0,,,,,volume\n");
    assert!(read_csv(&path, None).is_ok());
    assert!(matches!(read_csv(&path, Some(&pipe())), Err(Error::Validation(_))));
    std::fs::write(&path, "a,b\n1,2\n").unwrap();
    assert!(matches!(read_csv(&path, None), Err(Error::Parse { line: 1, .. })));
}
