use super::jet::{Jets, Order};
use super::tape::{forward, params_on_tape};
use super::*;
use crate::autodiff::{NodeId, Tape};

fn plain(seed: u64) -> NetworkSpec {
    NetworkSpec::mlp(3, 4, 2, 8).with_seed(seed)
}

fn variants() -> Vec<NetworkSpec> {
    let base = NetworkSpec::mlp(3, 4, 2, 6).with_seed(11).with_input_box(&[-1.0, 0.0, -0.5], &[1.0, 4.0, 0.5]);
    let fourier = Embedding::Fourier { features: 5, sigma: 1.0 };
    vec![
        base.clone(),
        base.clone().with_factorization(Factorization::DEFAULT_RWF),
        base.clone().with_embedding(fourier),
        base.clone().with_architecture(Architecture::ModifiedMlp),
        base.with_architecture(Architecture::ModifiedMlp)
            .with_embedding(fourier)
            .with_factorization(Factorization::DEFAULT_RWF),
    ]
}

fn points(n: usize, d: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * d).map(|_| rng.random_range(-0.9..0.9)).collect()
}

/// Output values, input gradients and diagonal Hessians at one point, from
/// the scalar tape.
fn tape_jets(net: &Network, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let xs: Vec<NodeId> = x.iter().map(|_| tape.input()).collect();
    let params = params_on_tape(net, &mut tape, false);
    let out = forward(net, &mut tape, &params, &xs).unwrap();
    tape.forward(x).unwrap();
    let mut vals = Vec::new();
    let mut grads = Vec::new();
    let mut hess = Vec::new();
    for &o in &out {
        vals.push(tape.value(o).unwrap());
        grads.push(tape.gradient(o, &xs).unwrap());
        hess.push(xs.iter().map(|&xi| tape.input_hessian_diag(o, xi).unwrap()).collect());
    }
    (vals, grads, hess)
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = Network::new(plain(7)).unwrap();
    let b = Network::new(plain(7)).unwrap();
    let c = Network::new(plain(8)).unwrap();
    assert_eq!(a.params.values, b.params.values);
    assert_ne!(a.params.values, c.params.values);
}

#[test]
fn biases_start_at_zero() {
    let net = Network::new(plain(1)).unwrap();
    for slot in net.params.layout().iter().filter(|s| s.role == TensorRole::Bias) {
        assert!(net.params.values[slot.range()].iter().all(|&b| b == 0.0));
    }
}

#[test]
fn fourier_widens_first_layer() {
    let spec = NetworkSpec::mlp(3, 4, 4, 256).with_embedding(Embedding::Fourier { features: 128, sigma: 1.0 });
    let layers = spec.layers();
    assert_eq!(layers[0].fan_in, 256);
    assert_eq!(layers[1].fan_in, 256);
    let net = Network::new(spec).unwrap();
    assert_eq!(net.params.fourier().unwrap().len(), 128 * 3);
}

#[test]
fn rwf_init_reproduces_dense_weights() {
    let spec = plain(3);
    let dense = Network::new(spec.clone()).unwrap();
    let rwf = Network::new(spec.with_factorization(Factorization::DEFAULT_RWF)).unwrap();
    let eff = rwf.effective_weights().unwrap();
    let mut k = 0;
    for (m, slots) in eff.iter().zip(dense.params.affine_layers()) {
        let w = &dense.params.values[slots.weight..slots.weight + m.data.len()];
        for (a, b) in m.data.iter().zip(w) {
            assert!((a - b).abs() <= f64::EPSILON * b.abs(), "{a} vs {b}");
            k += 1;
        }
    }
    assert_eq!(k, dense.spec.layers().iter().map(|l| l.fan_in * l.fan_out).sum::<usize>());
    assert!(dense.effective_weights().is_err());
}

#[test]
fn fourier_embed_examples() {
    let g = fourier_embed(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.25], 2).unwrap();
    assert_eq!(g, vec![1.0, 1.0, 0.0, 0.0]);
    let g = fourier_embed(&[0.25], &[1.0], 1).unwrap();
    assert!((g[0] - 0.0).abs() < 1e-15 && (g[1] - 1.0).abs() < 1e-15);
    assert!(fourier_embed(&[0.0, 0.0], &[1.0], 1).is_err());
}

#[test]
fn zero_parameters_give_zero_output() {
    for spec in variants() {
        let mut net = Network::new(spec).unwrap();
        net.params.values.iter_mut().for_each(|v| *v = 0.0);
        let y = net.predict(&points(5, 3, 1)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn one_hidden_unit_matches_closed_form() {
    // 1-16-1 with known weights against a direct evaluation
    let spec = NetworkSpec::mlp(1, 1, 1, 16);
    let mut net = Network::new(spec).unwrap();
    let w1: Vec<f64> = (0..16).map(|k| 0.1 * k as f64 - 0.7).collect();
    let b1: Vec<f64> = (0..16).map(|k| 0.05 * k as f64).collect();
    let w2: Vec<f64> = (0..16).map(|k| (k as f64).sin()).collect();
    let b2 = 0.3;
    let a = net.params.affine_layers().to_vec();
    net.params.values[a[0].weight..a[0].weight + 16].copy_from_slice(&w1);
    net.params.values[a[0].bias..a[0].bias + 16].copy_from_slice(&b1);
    net.params.values[a[1].weight..a[1].weight + 16].copy_from_slice(&w2);
    net.params.values[a[1].bias] = b2;
    for x in [-1.3, 0.0, 0.4, 2.0] {
        let expect = b2 + (0..16).map(|k| w2[k] * (w1[k] * x + b1[k]).tanh()).sum::<f64>();
        let got = net.predict(&[x]).unwrap()[0];
        assert!((got - expect).abs() < 1e-12);
        assert!((super::tape::eval_point(&net, &[x]).unwrap()[0] - expect).abs() < 1e-12);
    }
}

#[test]
fn modified_mlp_parameter_excess() {
    let plain = NetworkSpec::mlp(3, 4, 4, 256);
    let modified = plain.clone().with_architecture(Architecture::ModifiedMlp);
    assert_eq!(modified.num_params() - plain.num_params(), 2 * (3 * 256 + 256));
}

#[test]
fn saturated_gate_selects_encoder() {
    let spec = NetworkSpec::mlp(2, 1, 1, 3).with_architecture(Architecture::ModifiedMlp).with_seed(5);
    let mut net = Network::new(spec).unwrap();
    let a = net.params.affine_layers().to_vec();
    let hidden = a[2];
    let x = [0.3, -0.2];
    let encoder = |net: &Network, slots: &AffineSlots| -> Vec<f64> {
        (0..3)
            .map(|o| {
                let w = &net.params.values[slots.weight + o * 2..slots.weight + o * 2 + 2];
                (net.params.values[slots.bias + o] + w[0] * x[0] + w[1] * x[1]).tanh()
            })
            .collect()
    };
    let u = encoder(&net, &a[0]);
    let v = encoder(&net, &a[1]);
    let out = a[3];
    let readout = |net: &Network, g: &[f64]| -> f64 {
        net.params.values[out.bias]
            + (0..3).map(|k| net.params.values[out.weight + k] * g[k]).sum::<f64>()
    };
    net.params.values[hidden.weight..hidden.weight + 6].iter_mut().for_each(|w| *w = 0.0);
    // gate 1 passes U through, gate 0 passes V
    for (bias, enc) in [(40.0, &u), (0.0, &v)] {
        net.params.values[hidden.bias..hidden.bias + 3].iter_mut().for_each(|b| *b = bias);
        let y = net.predict(&x).unwrap()[0];
        assert!((y - readout(&net, enc)).abs() < 1e-12, "{y} vs {} (u {:?} v {:?})", readout(&net, enc), u, v);
    }
}

#[test]
fn rwf_network_matches_materialized() {
    for spec in variants().into_iter().filter(|s| s.factorization != Factorization::None) {
        let net = Network::new(spec).unwrap();
        let flat = net.materialized();
        let x = points(20, 3, 2);
        let a = net.predict(&x).unwrap();
        let b = flat.predict(&x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn jets_match_tape_derivatives() {
    for spec in variants() {
        let net = Network::new(spec).unwrap();
        let x = points(4, 3, 3);
        let trace = net.forward_jets(&x, Order::Second).unwrap();
        for i in 0..4 {
            let (vals, grads, hess) = tape_jets(&net, &x[i * 3..i * 3 + 3]);
            for k in 0..4 {
                assert!((trace.output.value(i, k) - vals[k]).abs() < 1e-12);
                for j in 0..3 {
                    assert!((trace.output.first(j, i, k) - grads[k][j]).abs() < 1e-11);
                    assert!((trace.output.second(j, i, k) - hess[k][j]).abs() < 1e-10);
                }
            }
        }
        let first = net.forward_jets(&x, Order::First).unwrap();
        for i in 0..4 {
            for k in 0..4 {
                for j in 0..3 {
                    assert_eq!(first.output.first(j, i, k), trace.output.first(j, i, k));
                }
            }
        }
    }
}

/// A fixed scalar of all output channels, with its adjoint.
fn probe(out: &Jets) -> (f64, Jets) {
    let mut adj = out.clone();
    let mut total = 0.0;
    for (idx, (a, &y)) in adj.data_mut().iter_mut().zip(out.data()).enumerate() {
        let c = 0.3 + 0.01 * (idx % 17) as f64;
        total += c * y * y;
        *a = 2.0 * c * y;
    }
    (total, adj)
}

#[test]
fn jet_backward_matches_tape_parameter_gradient() {
    for spec in variants() {
        let net = Network::new(spec).unwrap();
        let x = points(3, 3, 4);
        let trace = net.forward_jets(&x, Order::Second).unwrap();
        let (_, adj) = probe(&trace.output);
        let mut grad = vec![0.0; net.num_params()];
        net.backward_jets(&trace, &adj, &mut grad).unwrap();

        // same scalar built on the tape, parameters and inputs both recorded
        let dirs = 3;
        let n = 3;
        let w = 4;
        let mut terms = Vec::new();
        let mut tape = Tape::new();
        let params = params_on_tape(&net, &mut tape, true);
        let mut xs_all = Vec::new();
        for i in 0..n {
            let xs: Vec<NodeId> = (0..3).map(|_| tape.input()).collect();
            let out = forward(&net, &mut tape, &params, &xs).unwrap();
            for k in 0..w {
                let coeff = |c: usize| 0.3 + 0.01 * ((c * n * w + i * w + k) % 17) as f64;
                let sq = tape.square(out[k]);
                terms.push(tape.scale(sq, coeff(0)));
                let g = tape.grad_nodes(out[k], &xs).unwrap();
                for j in 0..dirs {
                    let sq = tape.square(g[j]);
                    terms.push(tape.scale(sq, coeff(1 + j)));
                    let h = tape.grad_nodes(g[j], &[xs[j]]).unwrap()[0];
                    let sq = tape.square(h);
                    terms.push(tape.scale(sq, coeff(1 + dirs + j)));
                }
            }
            xs_all.extend(xs);
        }
        let root = tape.sum(&terms);
        let mut inputs = net.params.values.clone();
        inputs.extend_from_slice(&x);
        tape.forward(&inputs).unwrap();
        let expect = tape.gradient(root, &params).unwrap();
        let scale = expect.iter().fold(1.0f64, |m, g| m.max(g.abs()));
        for (p, (a, b)) in grad.iter().zip(&expect).enumerate() {
            assert!((a - b).abs() < 1e-10 * scale, "param {p}: {a} vs {b}");
        }
    }
}

#[test]
fn jet_backward_matches_finite_differences() {
    let spec = variants().pop().unwrap();
    let net = Network::new(spec).unwrap();
    let x = points(5, 3, 9);
    let objective = |net: &Network| probe(&net.forward_jets(&x, Order::Second).unwrap().output).0;
    let trace = net.forward_jets(&x, Order::Second).unwrap();
    let (_, adj) = probe(&trace.output);
    let mut grad = vec![0.0; net.num_params()];
    net.backward_jets(&trace, &adj, &mut grad).unwrap();
    let h = 1e-4;
    // loose: the objective holds squared second derivatives, so central
    // differences carry visible truncation error
    for p in (0..net.num_params()).step_by(7) {
        let mut plus = net.clone();
        plus.params.values[p] += h;
        let mut minus = net.clone();
        minus.params.values[p] -= h;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        assert!((fd - grad[p]).abs() < 1e-4 * (1.0 + fd.abs()), "param {p}: fd {fd} vs {}", grad[p]);
    }
}

#[test]
fn predict_is_chunk_invariant() {
    let net = Network::new(variants().remove(3)).unwrap();
    let x = points(5000, 3, 5);
    let all = net.predict(&x).unwrap();
    let one = net.predict(&x[3 * 4500..3 * 4501]).unwrap();
    assert_eq!(&all[4 * 4500..4 * 4501], &one[..]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for spec in variants() {
        let net = Network::new(spec).unwrap();
        let mut buf = Vec::new();
        checkpoint::write_network(&mut buf, &net).unwrap();
        let back = checkpoint::read_network(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        let x = points(7, 3, 6);
        assert_eq!(net.predict(&x).unwrap(), back.predict(&x).unwrap());
    }
}

#[test]
fn checkpoint_rejects_garbage() {
    let net = Network::new(plain(1)).unwrap();
    let mut buf = Vec::new();
    checkpoint::write_network(&mut buf, &net).unwrap();
    assert!(matches!(checkpoint::read_network(&mut &b"NOPE"[..]), Err(Error::Checkpoint(_))));
    let cut = &buf[..buf.len() - 3];
    assert!(matches!(checkpoint::read_network(&mut &cut[..]), Err(Error::Checkpoint(_))));
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(Network::new(NetworkSpec::mlp(3, 4, 0, 8)).is_err());
    assert!(Network::new(NetworkSpec::mlp(3, 4, 2, 8).with_embedding(Embedding::Fourier { features: 0, sigma: 1.0 }))
        .is_err());
    let net = Network::new(plain(1)).unwrap();
    assert!(net.predict(&[0.0, 1.0]).is_err());
}


#[test]
fn fast_tanh_tracks_libm() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..200_000 {
        let x: f64 = if i % 2 == 0 { rng.random_range(-25.0..25.0) } else { rng.random_range(-1e-3..1e-3) };
        let r = x.tanh();
        assert!((super::jet::tanh(x) - r).abs() <= 4.0 * f64::EPSILON * r.abs(), "x = {x}");
    }
    assert_eq!(super::jet::tanh(0.0), 0.0);
    assert_eq!(super::jet::tanh(f64::INFINITY), 1.0);
    assert_eq!(super::jet::tanh(-800.0), -1.0);
    assert!(super::jet::tanh(f64::NAN).is_nan());
}
