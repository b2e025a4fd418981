use super::*;
use crate::geometry::{generate_pipe_cloud, DomainSpec, Stratum, StratifiedPointCloud, StratumCounts};
use crate::nn::tape;
use crate::nn::{Architecture, Embedding, Factorization, LayerId, TensorRole};
use crate::physics::{FluidParams, Frame, PoiseuilleOracle, Scales, INLET_RADIUS, LENGTH};

fn small_spec(m1: usize, m2: usize, q: usize) -> OperatorSpec {
    let b1 = NetworkSpec::mlp(m1, q, 2, 8).with_seed(1);
    let b2 = NetworkSpec::mlp(m2, q, 2, 8).with_seed(2);
    let trunk = NetworkSpec::mlp(3, q, 2, 10)
        .with_architecture(Architecture::ModifiedMlp)
        .with_embedding(Embedding::Fourier { features: 4, sigma: 1.0 })
        .with_factorization(Factorization::DEFAULT_RWF)
        .with_seed(3);
    OperatorSpec::new(b1, b2, trunk, q)
}

fn zero_output_layer(net: &mut Network, bias: f64) {
    for role in [TensorRole::Weight, TensorRole::Direction, TensorRole::Bias] {
        if let Some(slot) = net.params.slot(LayerId::Output, role) {
            let v = if role == TensorRole::Bias { bias } else { 0.0 };
            net.params.values[slot.range()].iter_mut().for_each(|x| *x = v);
        }
    }
}

const S1: [f64; 3] = [0.3, -0.2, 0.9];
const S2: [f64; 2] = [0.1, 0.4];
const X: [f64; 3] = [0.2, 0.5, -0.1];

#[test]
fn spec_validation() {
    let spec = small_spec(3, 2, 8);
    assert!(spec.validate().is_ok());
    let mut bad = spec.clone();
    bad.q = 12;
    assert!(bad.validate().is_err());
    let mut bad = spec.clone();
    bad.partition[1].1 = 3..4;
    assert!(bad.validate().is_err());
    let mut bad = spec.clone();
    bad.partition.pop();
    assert!(bad.validate().is_err());
    let big = OperatorSpec::new(
        NetworkSpec::mlp(4, 400, 1, 4),
        NetworkSpec::mlp(4, 400, 1, 4),
        NetworkSpec::mlp(3, 400, 1, 4),
        400,
    );
    assert_eq!(big.partition[3], ("p".to_string(), 300..400));
    let total: usize = big.partition.iter().map(|(_, r)| r.len()).sum();
    assert_eq!(total, 400);
}

#[test]
fn zero_trunk_annihilates_outputs() {
    let mut op = DeepONet::new(small_spec(3, 2, 8)).unwrap();
    zero_output_layer(&mut op.trunk, 0.0);
    let d = op.input_derivatives(&S1, &S2, &X).unwrap();
    assert!(d.value.iter().all(|&v| v == 0.0));
    assert!(d.first.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn zero_branch_products_give_zero_derivatives() {
    let mut op = DeepONet::new(small_spec(3, 2, 8)).unwrap();
    zero_output_layer(&mut op.branch1, 0.0);
    let d = op.input_derivatives(&S1, &S2, &X).unwrap();
    assert!(d.first.iter().chain(&d.second).flatten().all(|&v| v == 0.0));
}

/// Independent evaluation through the scalar tape of every sub-network.
fn direct(op: &DeepONet, s1: &[f64], s2: &[f64], x: &[f64; 3]) -> Vec<f64> {
    let b1 = tape::eval_point(&op.branch1, s1).unwrap();
    let b2 = tape::eval_point(&op.branch2, s2).unwrap();
    let t = tape::eval_point(&op.trunk, x).unwrap();
    op.spec.partition.iter().map(|(_, r)| r.clone().map(|j| b1[j] * b2[j] * t[j]).sum()).collect()
}

#[test]
fn matches_direct_evaluation() {
    let spec = OperatorSpec::new(
        NetworkSpec::mlp(4, 400, 1, 6).with_seed(4),
        NetworkSpec::mlp(2, 400, 1, 6).with_seed(5),
        NetworkSpec::mlp(3, 400, 2, 6).with_seed(6),
        400,
    );
    let op = DeepONet::new(spec).unwrap();
    let s1 = [0.1, 0.2, 0.3, 0.4];
    let got = op.eval_point(&s1, &S2, &X).unwrap();
    let want = direct(&op, &s1, &S2, &X);
    for k in 0..4 {
        assert!((got[k] - want[k]).abs() <= 1e-12 * (1.0 + want[k].abs()), "{k}");
    }
}

#[test]
fn single_branch_reduces_to_vanilla_deeponet() {
    let mut spec = small_spec(3, 2, 8);
    spec.partition = vec![("u".into(), 0..8)];
    let mut op = DeepONet::new(spec).unwrap();
    zero_output_layer(&mut op.branch2, 1.0);
    let got = op.eval_point(&S1, &S2, &X).unwrap();
    let b = tape::eval_point(&op.branch1, &S1).unwrap();
    let t = tape::eval_point(&op.trunk, &X).unwrap();
    let want: f64 = b.iter().zip(&t).map(|(a, c)| a * c).sum();
    assert_eq!(got.len(), 1);
    assert!((got[0] - want).abs() <= 1e-12 * (1.0 + want.abs()));
}

#[test]
fn bilinear_in_branch_embedding() {
    let op = DeepONet::new(small_spec(3, 2, 8)).unwrap();
    let mut scaled = op.clone();
    let c = 2.5;
    for role in [TensorRole::Weight, TensorRole::Bias] {
        let slot = scaled.branch1.params.slot(LayerId::Output, role).unwrap();
        scaled.branch1.params.values[slot.range()].iter_mut().for_each(|x| *x *= c);
    }
    let a = op.eval_point(&S1, &S2, &X).unwrap();
    let b = scaled.eval_point(&S1, &S2, &X).unwrap();
    for k in 0..4 {
        assert!((b[k] - c * a[k]).abs() <= 1e-12 * (1.0 + a[k].abs()));
    }
}

#[test]
fn permuting_partition_permutes_outputs() {
    let op = DeepONet::new(small_spec(3, 2, 8)).unwrap();
    let mut perm = op.clone();
    perm.spec.partition = vec![
        ("p".into(), 0..2),
        ("v1".into(), 2..4),
        ("v2".into(), 4..6),
        ("v3".into(), 6..8),
    ];
    let a = op.eval_point(&S1, &S2, &X).unwrap();
    let b = perm.eval_point(&S1, &S2, &X).unwrap();
    assert_eq!(a, b);
}

#[test]
fn input_derivatives_match_finite_differences() {
    let op = DeepONet::new(small_spec(3, 2, 8)).unwrap();
    let d = op.input_derivatives(&S1, &S2, &X).unwrap();
    let f = |x: [f64; 3]| op.eval_point(&S1, &S2, &x).unwrap();
    let h1 = 1e-5;
    let h2 = 1e-4;
    for j in 0..3 {
        let mut xp = X;
        let mut xm = X;
        xp[j] += h1;
        xm[j] -= h1;
        let (fp, fm) = (f(xp), f(xm));
        let mut xp2 = X;
        let mut xm2 = X;
        xp2[j] += h2;
        xm2[j] -= h2;
        let (gp, gm, g0) = (f(xp2), f(xm2), f(X));
        for k in 0..4 {
            let fd = (fp[k] - fm[k]) / (2.0 * h1);
            assert!((d.first[k][j] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "first {k} {j}: {} vs {fd}", d.first[k][j]);
            let fd2 = (gp[k] - 2.0 * g0[k] + gm[k]) / (h2 * h2);
            assert!((d.second[k][j] - fd2).abs() <= 1e-4 * fd2.abs().max(1e-2), "second {k} {j}: {} vs {fd2}", d.second[k][j]);
        }
    }
}

#[test]
fn derivatives_flow_through_trunk_only() {
    let op = DeepONet::new(small_spec(3, 2, 8)).unwrap();
    let d = op.input_derivatives(&S1, &S2, &X).unwrap();
    let b1 = op.branch1.predict(&S1).unwrap();
    let b2 = op.branch2.predict(&S2).unwrap();
    let t = op.trunk.forward_jets(&X, Order::Second).unwrap().output;
    for (k, (_, r)) in op.spec.partition.iter().enumerate() {
        for j in 0..3 {
            let first: f64 = r.clone().map(|c| b1[c] * b2[c] * t.first(j, 0, c)).sum();
            let second: f64 = r.clone().map(|c| b1[c] * b2[c] * t.second(j, 0, c)).sum();
            assert_eq!(d.first[k][j], first);
            assert_eq!(d.second[k][j], second);
        }
    }
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let mut op = DeepONet::new(small_spec(3, 2, 8)).unwrap();
    let x = [0.2, 0.5, -0.1, -0.4, 0.1, 0.3, 0.0, -0.2, 0.6];
    let inst = [0, 1, 1];
    let rows = SensorRows::new(3, 2, vec![0.3, -0.2, 0.9, 0.5, 0.1, -0.3], vec![0.1, 0.4, -0.2, 0.0]).unwrap();
    // objective: sum of squares of every channel
    let objective = |op: &DeepONet| -> f64 {
        let t = op.forward_jets(&x, &inst, &rows, Order::Second).unwrap();
        t.output.data().iter().map(|v| v * v).sum::<f64>() / 2.0
    };
    let trace = op.forward_jets(&x, &inst, &rows, Order::Second).unwrap();
    let mut grad = vec![0.0; op.num_params()];
    op.backward_jets(&trace, &trace.output, &mut grad).unwrap();
    let p0 = op.params();
    let h = 1e-6;
    for i in (0..p0.len()).step_by(7) {
        let mut p = p0.clone();
        p[i] += h;
        op.set_params(&p).unwrap();
        let fp = objective(&op);
        p[i] -= 2.0 * h;
        op.set_params(&p).unwrap();
        let fm = objective(&op);
        let fd = (fp - fm) / (2.0 * h);
        assert!((grad[i] - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "param {i}: {} vs {fd}", grad[i]);
    }
    op.set_params(&p0).unwrap();
}

#[test]
fn dimension_errors() {
    let op = DeepONet::new(small_spec(3, 2, 8)).unwrap();
    assert!(op.eval_point(&[1.0, 2.0], &S2, &X).is_err());
    assert!(op.eval_point(&S1, &[1.0], &X).is_err());
    let rows = SensorRows::single(&S1, &S2).unwrap();
    assert!(op.forward_jets(&X, &[1], &rows, Order::Value).is_err());
    assert!(op.forward_jets(&X, &[0, 0], &rows, Order::Value).is_err());
}

#[test]
fn checkpoint_roundtrip() {
    let op = DeepONet::new(small_spec(3, 2, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("op.bin");
    op.save(&path).unwrap();
    let back = DeepONet::load(&path).unwrap();
    assert_eq!(back.spec, op.spec);
    assert_eq!(back.params(), op.params());
    assert_eq!(back.eval_point(&S1, &S2, &X).unwrap(), op.eval_point(&S1, &S2, &X).unwrap());
    std::fs::write(&path, b"HFNN....").unwrap();
    assert!(DeepONet::load(&path).is_err());
}

fn pipe_clouds(vs: &[f64], per_stratum: usize) -> Vec<StratifiedPointCloud> {
    vs.iter()
        .map(|&v| {
            let o = PoiseuilleOracle::new(FluidParams::reference(v), 0.0);
            let n = per_stratum;
            let mut c = generate_pipe_cloud(o, StratumCounts::new(n, n, n, n), 7).unwrap();
            let data = crate::geometry::extract_data_scenario(
                &c,
                crate::geometry::Scenario::Random { fraction: 1.0 },
                None,
                0,
            )
            .unwrap();
            c.set(Stratum::Data, data);
            c
        })
        .collect()
}

#[test]
fn triplet_dimension_and_repetition_rules() {
    let domain = DomainSpec::straight_pipe(INLET_RADIUS, LENGTH);
    let layout = SensorLayout::area_stratified(&domain, 4, 3).unwrap();
    let scales = Scales::new(Frame::Dimensional, &FluidParams::reference(0.1));
    for n in [1, 2, 8] {
        for p in [1, 5, 100] {
            let vs: Vec<f64> = (0..n).map(|i| 0.04 + 0.01 * i as f64).collect();
            let triplets = build_triplets(&pipe_clouds(&vs, p), &layout, &scales).unwrap();
            for t in &triplets {
                assert_eq!(t.rows(), n * p);
                assert_eq!(t.coordinates.len(), n * p * 3);
                assert_eq!(t.sensors1.len(), n * p * 4);
                assert_eq!(t.sensors2.len(), n * p * 3);
                assert_eq!(t.targets.len(), n * p * 4);
                t.validate().unwrap();
                let (rows, local) = t.instance_rows().unwrap();
                assert_eq!(rows.instances(), n);
                for r in 0..t.rows() {
                    let k = local[r];
                    let a = &t.sensors1[r * 4..(r + 1) * 4];
                    let b = &rows.sensors1[k * 4..(k + 1) * 4];
                    assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
            }
        }
    }
}

#[test]
fn centerline_sensor_reads_max_velocity() {
    let layout = SensorLayout { inlet: vec![[0.0, 0.0, 0.0]], outlet: vec![[0.0, LENGTH, 0.0]] };
    let scales = Scales::new(Frame::Dimensional, &FluidParams::reference(0.1));
    let t = build_triplets(&pipe_clouds(&[0.1], 2), &layout, &scales).unwrap();
    assert_eq!(t[Stratum::Inlet.index()].sensors1[0], 0.1);
    assert_eq!(t[Stratum::Inlet.index()].sensors2[0], 0.0);
    // inlet targets miss pressure, data targets carry it
    assert!(!t[Stratum::Inlet.index()].mask[3]);
    assert!(t[Stratum::Data.index()].mask.iter().all(|&m| m));
}

#[test]
fn sensors_are_area_stratified() {
    let domain = DomainSpec::straight_pipe(INLET_RADIUS, LENGTH);
    let layout = SensorLayout::area_stratified(&domain, 64, 64).unwrap();
    assert_eq!(layout.inlet.len(), 64);
    let inner = layout.inlet.iter().filter(|x| x[0].hypot(x[2]) < INLET_RADIUS / 2.0).count();
    assert_eq!(inner, 16);
    assert!(layout.outlet.iter().all(|x| x[1] == LENGTH && x[0].hypot(x[2]) < INLET_RADIUS));
}

#[test]
fn triplet_dir_roundtrip() {
    let domain = DomainSpec::straight_pipe(INLET_RADIUS, LENGTH);
    let layout = SensorLayout::area_stratified(&domain, 4, 2).unwrap();
    let scales = Scales::new(Frame::Dimensionless, &FluidParams::reference(0.1));
    let t = build_triplets(&pipe_clouds(&[0.05, 0.1], 5), &layout, &scales).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let inlet = &t[Stratum::Inlet.index()];
    inlet.write_dir(dir.path()).unwrap();
    assert_eq!(&OperatorTriplet::read_dir(dir.path()).unwrap(), inlet);
    std::fs::write(dir.path().join("index.csv"), "sample\n0\n").unwrap();
    assert!(matches!(OperatorTriplet::read_dir(dir.path()), Err(Error::Validation(_))));
}

#[test]
fn geometry_mismatch_rejected() {
    let mut clouds = pipe_clouds(&[0.05, 0.1], 3);
    clouds[1].domain = Some(DomainSpec::aaa(INLET_RADIUS, LENGTH));
    let domain = DomainSpec::straight_pipe(INLET_RADIUS, LENGTH);
    let layout = SensorLayout::area_stratified(&domain, 4, 2).unwrap();
    let scales = Scales::new(Frame::Dimensional, &FluidParams::reference(0.1));
    assert!(matches!(build_triplets(&clouds, &layout, &scales), Err(Error::Validation(_))));
}
