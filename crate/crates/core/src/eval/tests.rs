use super::*;
use crate::geometry::{generate_pipe_cloud, read_csv, split, SplitFractions, StratumCounts};
use crate::physics::{FluidParams, PoiseuilleOracle, VELOCITIES};
use crate::training::{ModelKind, Techniques, TrainConfig};

struct Oracle(PoiseuilleOracle);

impl FieldModel for Oracle {
    fn predict_si(&self, points: &[[f64; 3]]) -> Result<Vec<[f64; 4]>> {
        points
            .iter()
            .map(|x| {
                let (v, p) = self.0.eval(x)?;
                Ok([v[0], v[1], v[2], p])
            })
            .collect()
    }
}

fn oracle(v: f64) -> PoiseuilleOracle {
    PoiseuilleOracle::new(FluidParams::reference(v), 0.0)
}

fn small_cloud(v: f64, seed: u64) -> StratifiedPointCloud {
    generate_pipe_cloud(oracle(v), StratumCounts::new(30, 60, 30, 150), seed).unwrap()
}

#[test]
fn relative_error_basics() {
    let truth: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin() + 2.0).collect();
    assert_eq!(l2_relative_error(&truth, &truth, 10).unwrap(), 0.0);
    let scaled: Vec<f64> = truth.iter().map(|t| 1.1 * t).collect();
    assert!((l2_relative_error(&scaled, &truth, 10).unwrap() - 0.1).abs() < 1e-12);
    assert!(l2_relative_error(&truth[1..], &truth, 10).is_err());
    assert!(l2_relative_error(&truth, &truth, 0).is_err());
}

#[test]
fn relative_error_is_a_mean_over_batches() {
    // two batches: the first off by a unit vector, the second exact
    let truth = vec![3.0, 4.0, 1.0, 1.0];
    let pred = vec![4.0, 4.0, 1.0, 1.0];
    let direct = ((1.0f64).sqrt() / 5.0 + 0.0) / 2.0;
    assert!((l2_relative_error(&pred, &truth, 2).unwrap() - direct).abs() < 1e-15);
    // a single batch uses the global norms
    let single = 1.0 / (27.0f64).sqrt();
    assert!((l2_relative_error(&pred, &truth, 10_000).unwrap() - single).abs() < 1e-15);
}

#[test]
fn zero_reference_batches_are_skipped() {
    let truth = vec![0.0, 0.0, 1.0, 2.0];
    let pred = vec![5.0, 5.0, 1.0, 2.0];
    assert_eq!(l2_relative_error(&pred, &truth, 2).unwrap(), 0.0);
    assert!(l2_relative_error(&pred, &[0.0; 4], 2).is_err());
}

#[test]
fn error_is_frame_independent_for_velocity() {
    let truth: Vec<f64> = (0..40).map(|i| 0.1 * (1.0 - (i as f64 / 40.0).powi(2))).collect();
    let pred: Vec<f64> = truth.iter().enumerate().map(|(i, t)| t + 1e-3 * (i as f64).cos()).collect();
    let scale = |v: &[f64]| v.iter().map(|x| x / 0.1).collect::<Vec<_>>();
    let a = l2_relative_error(&pred, &truth, 16).unwrap();
    let b = l2_relative_error(&scale(&pred), &scale(&truth), 16).unwrap();
    assert!((a - b).abs() <= 1e-14 * a);
}

#[test]
fn magnitudes() {
    let f = FlowField::new(vec![[0.0; 3]; 2], vec![[3.0, 4.0, 0.0], [0.0; 3]], vec![0.0; 2], Frame::Dimensional).unwrap();
    assert_eq!(velocity_magnitude(&f), vec![5.0, 0.0]);
    let (v, _) = oracle(0.1).eval(&[0.0, 0.1, 0.0]).unwrap();
    let f = FlowField::new(vec![[0.0, 0.1, 0.0]], vec![v], vec![0.0], Frame::Dimensional).unwrap();
    assert!((velocity_magnitude(&f)[0] - 0.1).abs() < 1e-15);
}

#[test]
fn pressure_shift() {
    let truth = vec![1.0, -2.0, 3.5, 0.25];
    let pred: Vec<f64> = truth.iter().map(|t| t + 7.0).collect();
    let (c, s) = pressure_shift_correct(&pred, &truth).unwrap();
    assert!((s - 7.0).abs() < 1e-12);
    assert!(c.iter().zip(&truth).all(|(a, b)| (a - b).abs() < 1e-12));
    assert_eq!(pressure_shift_correct(&truth, &truth).unwrap().1, 0.0);
    let noisy = vec![1.3, -2.2, 3.9, 0.0];
    let (c, _) = pressure_shift_correct(&noisy, &truth).unwrap();
    let mean: f64 = c.iter().zip(&truth).map(|(a, b)| a - b).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    assert!(pressure_shift_correct(&noisy[1..], &truth).is_err());
}

proptest::proptest! {
    #[test]
    fn shift_never_increases_error(
        truth in proptest::collection::vec(-10.0f64..10.0, 2..50),
        offset in -5.0f64..5.0,
        noise in proptest::collection::vec(-1.0f64..1.0, 50),
    ) {
        proptest::prop_assume!(truth.iter().any(|t| t.abs() > 1e-3));
        let pred: Vec<f64> = truth.iter().zip(&noise).map(|(t, n)| t + offset + n).collect();
        let (c, _) = pressure_shift_correct(&pred, &truth).unwrap();
        let before = l2_relative_error(&pred, &truth, DEFAULT_BATCH).unwrap();
        let after = l2_relative_error(&c, &truth, DEFAULT_BATCH).unwrap();
        proptest::prop_assert!(after <= before * (1.0 + 1e-12));
    }
}

#[test]
fn oracle_scores_zero_error() {
    let cloud = small_cloud(0.1, 1);
    let truth = reference_field(&cloud).unwrap();
    assert_eq!(truth.len(), 270);
    let e = evaluate_field(&Oracle(oracle(0.1)), &truth, false).unwrap();
    assert_eq!((e.velocity, e.pressure, e.shift), (0.0, 0.0, None));
    let e = evaluate_field(&Oracle(oracle(0.1)), &truth, true).unwrap();
    assert_eq!(e.shift, Some(0.0));
}

#[test]
fn report_keys_and_csv() {
    let errors = FieldErrors { velocity: 0.02, pressure: 0.05, shift: None, infer_seconds: 0.5, points: 10 };
    let mut report = EvalReport::default();
    report.push(EvalEntry::new("pinn@0", 0.1, "test", &errors, 12.0, Some(40))).unwrap();
    report.push(EvalEntry::new("pinn@1", 0.1, "test", &FieldErrors { velocity: 0.04, ..errors }, 11.0, None)).unwrap();
    assert!(report.push(EvalEntry::new("pinn@0", 0.1, "test", &errors, 1.0, None)).is_err());
    report.push(EvalEntry::new("pinn@0", 0.04, "test", &errors, 1.0, None)).unwrap();
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,V,split,vel_l2_rel,pres_l2_rel,train_s,infer_s,stop_iter");
    assert_eq!(lines[1], "pinn@0,0.1,test,0.02,0.05,12.000,0.500,40");
    assert!(lines[2].ends_with(','));
    let summary = report.summary();
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0].runs, 2);
    assert!((summary[0].velocity.0 - 0.03).abs() < 1e-15);
    assert!((summary[0].velocity.1 - 0.02f64.hypot(0.0) / 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(mean_sd(&[4.0]), (4.0, 0.0));
}

#[test]
fn csv_export_roundtrips_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = small_cloud(0.1, 2);
    let truth = reference_field(&cloud).unwrap();
    let path = dir.path().join("field.csv");
    export_field(&Oracle(oracle(0.1)), &truth.points, None, ExportFormat::Csv, &path).unwrap();
    let back = read_csv(&path, None).unwrap();
    assert_eq!(back.get(Stratum::Data).x, truth.points);

    let path = dir.path().join("field_err.csv");
    export_field(&Oracle(oracle(0.1)), &truth.points, Some(&truth), ExportFormat::Csv, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().next().unwrap().ends_with("err_v1,err_v2,err_v3,err_p"));
    for line in text.lines().skip(1) {
        assert!(line.split(',').skip(8).all(|c| c == "0.0"), "{line}");
    }
    assert_eq!(read_csv(&path, None).unwrap().get(Stratum::Data).x, truth.points);
}

#[test]
fn vtk_export_has_magic() {
    let dir = tempfile::tempdir().unwrap();
    let points = vec![[0.0, 0.05, 0.0], [0.001, 0.1, 0.002]];
    let path = dir.path().join("field.vtk");
    export_field(&Oracle(oracle(0.1)), &points, None, ExportFormat::VtkLegacy, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), VTK_MAGIC);
    assert!(text.contains("POINTS 2 double") && text.contains("SCALARS pressure double 1"));
    assert!("vtk".parse::<ExportFormat>().is_ok() && "xml".parse::<ExportFormat>().is_err());
}

fn tiny_config(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        kind,
        iterations: 6,
        batch_size: 16,
        log_every: 3,
        checkpoint_every: 3,
        hidden_width: 8,
        hidden_layers: 2,
        fourier_features: 4,
        q: 8,
        branch_width: 8,
        branch_layers: 2,
        ..TrainConfig::default()
    }
}

fn experiment() -> CoordinateExperiment {
    let [train, val, test] = split(&small_cloud(0.1, 3), SplitFractions::new(0.6, 0.2, 0.2).unwrap(), 4).unwrap();
    CoordinateExperiment { train, val, test, params: FluidParams::reference(0.1) }
}

#[test]
fn ablation_rows_and_determinism() {
    let exp = experiment();
    let base = tiny_config(ModelKind::Pinn);
    let one = ablation_run(&exp, &base, &[Techniques::ALL_ON], &[0]).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].entries.len(), 1);
    let two = ablation_run(&exp, &base, &[Techniques::ALL_OFF, Techniques::ALL_OFF], &[0, 1]).unwrap();
    assert_eq!(two.len(), 2);
    let key = |r: &EvalReport| r.entries.iter().map(|e| (e.model.clone(), e.velocity, e.pressure)).collect::<Vec<_>>();
    assert_eq!(key(&two[0]), key(&two[1]));
    assert_eq!(two[0].entries[1].model, "pinn:none@1");
}

fn operator_experiment() -> OperatorExperiment {
    let instances = VELOCITIES
        .iter()
        .map(|&v| {
            let mut c = small_cloud(v, 5);
            let data = crate::geometry::extract_data_scenario(
                &c,
                crate::geometry::Scenario::Random { fraction: 0.2 },
                None,
                6,
            )
            .unwrap();
            c.set(Stratum::Data, data);
            OperatorInstance { v, clouds: split(&c, SplitFractions::new(0.6, 0.2, 0.2).unwrap(), 7).unwrap() }
        })
        .collect();
    let domain = crate::geometry::DomainSpec::straight_pipe(crate::physics::INLET_RADIUS, crate::physics::LENGTH);
    OperatorExperiment {
        instances,
        layout: crate::operators::SensorLayout::area_stratified(&domain, 8, 4).unwrap(),
        reference_v: 0.1,
    }
}

#[test]
fn split_study_enforces_extremes() {
    let exp = operator_experiment();
    let bad = SplitScenario { name: "bad".into(), train_v: vec![0.05, 0.15], test_v: vec![0.04] };
    match split_study(&exp, &[bad], &tiny_config(ModelKind::DeepONet)) {
        Err(Error::Validation(p)) => assert!(p[0].contains("0.04")),
        other => panic!("expected a validation error, got {other:?}"),
    }
    let overlap = SplitScenario { name: "o".into(), train_v: vec![0.04, 0.15], test_v: vec![0.15] };
    assert!(split_study(&exp, &[overlap], &tiny_config(ModelKind::DeepONet)).is_err());
}

#[test]
fn split_study_reports_every_instance() {
    let exp = operator_experiment();
    let scenarios = default_split_scenarios();
    let report = split_study(&exp, &scenarios[..2], &tiny_config(ModelKind::DeepONet)).unwrap();
    assert_eq!(report.entries.len(), 8 + 8);
    let zero = report.entries.iter().filter(|e| e.model.ends_with("8-0")).all(|e| e.split == "train");
    assert!(zero);
    assert_eq!(report.entries.iter().filter(|e| e.split == "test").count(), 3);
    assert!(report.entries.iter().all(|e| e.velocity.is_finite() && e.velocity >= 0.0));
}

#[test]
fn operator_residual_metric_runs() {
    let exp = operator_experiment();
    let config = tiny_config(ModelKind::PiDeepONet);
    let op = exp.build_model(&config).unwrap();
    let pts = reference_field(&exp.instances[0].clouds[2]).unwrap().points;
    let r = residual_metric(&exp, &op, 0.04, &pts, &config).unwrap();
    assert!(r.is_finite() && r >= 0.0);
}
