//! Single-point forward passes recorded on the scalar autodiff tape.
//!
//! These are the reference implementations: slow, but every intermediate is
//! a tape node, so parameter gradients and input derivatives of any order
//! supported by the tape are available.

use super::{AffineSlots, Architecture, Embedding, LayerId, Network};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use std::f64::consts::PI;

/// Records every parameter on the tape: as registered inputs when
/// `trainable` (bind them with [`Network::params`] values, in order, after
/// any inputs registered earlier) or as constants otherwise.
pub fn params_on_tape(net: &Network, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
    net.params
        .values
        .iter()
        .map(|&v| if trainable { tape.input() } else { tape.constant(v) })
        .collect()
}

/// `gamma(x)` on the tape; `b` is the frozen `e x d` matrix.
pub fn fourier_embed(tape: &mut Tape, x: &[NodeId], b: &[f64], features: usize) -> Vec<NodeId> {
    let d = x.len();
    let phases: Vec<NodeId> = (0..features)
        .map(|k| {
            let terms: Vec<NodeId> =
                (0..d).map(|m| tape.scale(x[m], 2.0 * PI * b[k * d + m])).collect();
            tape.sum(&terms)
        })
        .collect();
    let mut out: Vec<NodeId> = phases.iter().map(|&p| tape.cos(p)).collect();
    out.extend(phases.iter().map(|&p| tape.sin(p)));
    out
}

fn affine(tape: &mut Tape, params: &[NodeId], slots: &AffineSlots, x: &[NodeId]) -> Vec<NodeId> {
    let (fan_in, fan_out) = (slots.shape.fan_in, slots.shape.fan_out);
    (0..fan_out)
        .map(|o| {
            let mut terms = Vec::with_capacity(fan_in + 1);
            terms.push(params[slots.bias + o]);
            for (i, &xi) in x.iter().enumerate() {
                let v = params[slots.weight + o * fan_in + i];
                let w = match slots.scale {
                    None => v,
                    Some(s_at) => tape.mul(params[s_at + o], v),
                };
                terms.push(tape.mul(w, xi));
            }
            tape.sum(&terms)
        })
        .collect()
}

fn layer(net: &Network, id: LayerId) -> &AffineSlots {
    net.params
        .affine_layers()
        .iter()
        .find(|s| s.shape.id == id)
        .expect("layer present in layout")
}

fn features(net: &Network, tape: &mut Tape, x: &[NodeId]) -> Result<Vec<NodeId>> {
    let spec = &net.spec;
    if x.len() != spec.input_dim {
        return Err(Error::Dimension { expected: spec.input_dim, got: x.len(), context: "network input" });
    }
    let normalized: Vec<NodeId> = x
        .iter()
        .enumerate()
        .map(|(m, &xm)| {
            let shift = tape.constant(spec.input_shift[m]);
            let centered = tape.sub(xm, shift);
            tape.scale(centered, spec.input_scale[m])
        })
        .collect();
    Ok(match spec.embedding {
        Embedding::None => normalized,
        Embedding::Fourier { features, .. } => {
            let b = net.params.fourier().expect("fourier matrix present");
            fourier_embed(tape, &normalized, b, features)
        }
    })
}

fn check_params(net: &Network, params: &[NodeId]) -> Result<()> {
    if params.len() != net.num_params() {
        return Err(Error::Dimension { expected: net.num_params(), got: params.len(), context: "parameter nodes" });
    }
    Ok(())
}

/// Plain tanh MLP: hidden layers `tanh(W h + b)`, affine output.
pub fn mlp_forward(net: &Network, tape: &mut Tape, params: &[NodeId], x: &[NodeId]) -> Result<Vec<NodeId>> {
    if net.spec.architecture != Architecture::Mlp {
        return Err(Error::usage("mlp_forward called on a modified-mlp network"));
    }
    check_params(net, params)?;
    let mut h = features(net, tape, x)?;
    for l in 0..net.spec.hidden_layers {
        let z = affine(tape, params, layer(net, LayerId::Hidden(l)), &h);
        h = z.into_iter().map(|zk| tape.tanh(zk)).collect();
    }
    Ok(affine(tape, params, layer(net, LayerId::Output), &h))
}

/// Modified-MLP: encoders `U = tanh(W1 x + b1)`, `V = tanh(W2 x + b2)`,
/// hidden outputs `g = tanh(f) * U + (1 - tanh(f)) * V` with
/// `f = W g_prev + b`, affine output.
pub fn modified_mlp_forward(
    net: &Network,
    tape: &mut Tape,
    params: &[NodeId],
    x: &[NodeId],
) -> Result<Vec<NodeId>> {
    if net.spec.architecture != Architecture::ModifiedMlp {
        return Err(Error::usage("modified_mlp_forward called on a plain mlp network"));
    }
    check_params(net, params)?;
    let feats = features(net, tape, x)?;
    let zu = affine(tape, params, layer(net, LayerId::EncoderU), &feats);
    let u: Vec<NodeId> = zu.into_iter().map(|z| tape.tanh(z)).collect();
    let zv = affine(tape, params, layer(net, LayerId::EncoderV), &feats);
    let v: Vec<NodeId> = zv.into_iter().map(|z| tape.tanh(z)).collect();
    let one = tape.constant(1.0);
    let mut g = feats;
    for l in 0..net.spec.hidden_layers {
        let f = affine(tape, params, layer(net, LayerId::Hidden(l)), &g);
        g = f
            .into_iter()
            .enumerate()
            .map(|(k, fk)| {
                let s = tape.tanh(fk);
                let su = tape.mul(s, u[k]);
                let rest = tape.sub(one, s);
                let rv = tape.mul(rest, v[k]);
                tape.add(su, rv)
            })
            .collect();
    }
    Ok(affine(tape, params, layer(net, LayerId::Output), &g))
}

/// Dispatches on the architecture.
pub fn forward(net: &Network, tape: &mut Tape, params: &[NodeId], x: &[NodeId]) -> Result<Vec<NodeId>> {
    match net.spec.architecture {
        Architecture::Mlp => mlp_forward(net, tape, params, x),
        Architecture::ModifiedMlp => modified_mlp_forward(net, tape, params, x),
    }
}

/// Convenience: value of the network at one point via the tape.
pub fn eval_point(net: &Network, x: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xs: Vec<NodeId> = x.iter().map(|_| tape.input()).collect();
    let params = params_on_tape(net, &mut tape, false);
    let out = forward(net, &mut tape, &params, &xs)?;
    tape.forward(x)?;
    out.iter().map(|&o| tape.value(o)).collect()
}
