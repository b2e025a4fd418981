//! Batched propagation of values and input derivatives through a network.
//!
//! Every activation is carried as a truncated Taylor "jet" in the network
//! inputs: the value, the first derivative along each input direction and
//! (for [`Order::Second`]) the pure second derivative along each direction.
//! Mixed second derivatives are never formed; the Navier-Stokes residual only
//! needs Laplacians.
//!
//! A batch of `n` points is stored channel-major: rows `[c*n, (c+1)*n)` hold
//! channel `c`, so one affine layer is a single matrix product over all
//! channels. The reverse pass is written out by hand for each layer kind and
//! accumulates parameter gradients of any scalar function of the output jets.

use matrixmultiply::dgemm;

use super::{Architecture, Embedding, LayerShape, Network};
use crate::error::{Error, Result};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Value,
    First,
    Second,
}

impl Order {
    pub fn channels(self, dirs: usize) -> usize {
        match self {
            Order::Value => 1,
            Order::First => 1 + dirs,
            Order::Second => 1 + 2 * dirs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Jets {
    order: Order,
    dirs: usize,
    n: usize,
    width: usize,
    data: Vec<f64>,
}

impl Jets {
    pub fn zeros(order: Order, dirs: usize, n: usize, width: usize) -> Jets {
        Jets { order, dirs, n, width, data: vec![0.0; order.channels(dirs) * n * width] }
    }

    pub fn order(&self) -> Order {
        self.order
    }

    pub fn dirs(&self) -> usize {
        self.dirs
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.order.channels(self.dirs)
    }

    fn rows(&self) -> usize {
        self.channels() * self.n
    }

    fn block(&self) -> usize {
        self.n * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let b = self.block();
        &self.data[c * b..(c + 1) * b]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let b = self.block();
        &mut self.data[c * b..(c + 1) * b]
    }

    pub fn value(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.width + k]
    }

    /// d/dx_j of output `k` at point `i`.
    pub fn first(&self, j: usize, i: usize, k: usize) -> f64 {
        self.data[(1 + j) * self.block() + i * self.width + k]
    }

    /// d^2/dx_j^2 of output `k` at point `i`.
    pub fn second(&self, j: usize, i: usize, k: usize) -> f64 {
        self.data[(1 + self.dirs + j) * self.block() + i * self.width + k]
    }

    pub fn value_mut(&mut self, i: usize, k: usize) -> &mut f64 {
        let w = self.width;
        &mut self.data[i * w + k]
    }

    pub fn first_mut(&mut self, j: usize, i: usize, k: usize) -> &mut f64 {
        let at = (1 + j) * self.block() + i * self.width + k;
        &mut self.data[at]
    }

    pub fn second_mut(&mut self, j: usize, i: usize, k: usize) -> &mut f64 {
        let at = (1 + self.dirs + j) * self.block() + i * self.width + k;
        &mut self.data[at]
    }

    fn like(&self, width: usize) -> Jets {
        Jets::zeros(self.order, self.dirs, self.n, width)
    }
}

/// `c = a * b + beta * c` for row/column-strided `a` (m x k) and `b` (k x n)
/// into row-major contiguous `c` (m x n).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for x in &mut c[..m * n] {
            *x *= beta;
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Like [`gemm`] with `beta = 0`, writing into a fresh buffer without
/// zero-filling it first.
#[allow(clippy::too_many_arguments)]
fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize) -> Vec<f64> {
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: inputs are bounds-checked above; with beta = 0 the kernel never
    // reads `c` and writes every one of its m * n elements.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

fn affine_forward(input: &Jets, w: &[f64], bias: &[f64], shape: LayerShape) -> Jets {
    let (fan_in, fan_out) = (shape.fan_in, shape.fan_out);
    let data = gemm_new(input.rows(), fan_in, fan_out, &input.data, fan_in, 1, w, 1, fan_in);
    let mut out = Jets { order: input.order, dirs: input.dirs, n: input.n, width: fan_out, data };
    for row in out.channel_mut(0).chunks_exact_mut(fan_out) {
        for (z, b) in row.iter_mut().zip(bias) {
            *z += b;
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input adjoint when
/// requested.
fn affine_backward(
    input: &Jets,
    out_adj: &Jets,
    w: &[f64],
    shape: LayerShape,
    gw: &mut [f64],
    gb: &mut [f64],
    need_input: bool,
) -> Option<Jets> {
    let (fan_in, fan_out) = (shape.fan_in, shape.fan_out);
    let rows = out_adj.rows();
    gemm(fan_out, rows, fan_in, &out_adj.data, 1, fan_out, &input.data, fan_in, 1, 1.0, gw);
    for row in out_adj.channel(0).chunks_exact(fan_out) {
        for (g, a) in gb.iter_mut().zip(row) {
            *g += a;
        }
    }
    need_input.then(|| {
        let data = gemm_new(rows, fan_out, fan_in, &out_adj.data, fan_out, 1, w, fan_in, 1);
        Jets { order: input.order, dirs: input.dirs, n: input.n, width: fan_in, data }
    })
}

/// Branch-free tanh, within a few ulp of `f64::tanh` and several times
/// faster because the loop around it vectorizes.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    const COEFFS: [f64; 12] = [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
    ];
    // tanh|x| = -m / (2 + m), m = expm1(-2|x|); beyond 20 the result is 1
    let mut a = x.abs();
    if a > 20.0 {
        a = 20.0;
    }
    let y = -2.0 * a;
    let t = y * std::f64::consts::LOG2_E + SHIFTER;
    let n = t - SHIFTER;
    let r = (y - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in COEFFS {
        p = p * r + c;
    }
    p *= r;
    // 2^n from the low bits of the shifted value
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    let m = scale * p + (scale - 1.0);
    (-m / (2.0 + m)).copysign(x)
}

#[inline(always)]
fn tanh_forward_impl(z: &Jets) -> Jets {
    let blk = z.block();
    let dirs = z.dirs;
    let zc: Vec<&[f64]> = z.data.chunks_exact(blk).collect();
    let t: Vec<f64> = zc[0].iter().map(|&z0| tanh(z0)).collect();
    let mut data = Vec::with_capacity(z.data.len());
    data.extend_from_slice(&t);
    if z.order != Order::Value {
        for j in 0..dirs {
            data.extend(zc[1 + j].iter().zip(&t).map(|(&zj, &t)| (1.0 - t * t) * zj));
        }
    }
    if z.order == Order::Second {
        for j in 0..dirs {
            data.extend(zc[1 + j].iter().zip(zc[1 + dirs + j]).zip(&t).map(|((&zj, &zjj), &t)| {
                let d1 = 1.0 - t * t;
                let d2 = -2.0 * t * d1;
                d1 * zjj + d2 * zj * zj
            }));
        }
    }
    Jets { order: z.order, dirs, n: z.n, width: z.width, data }
}

/// Adjoint of [`tanh_forward`]; `h` is the forward output.
#[inline(always)]
fn tanh_backward_impl(h_adj: &Jets, z: &Jets, h: &Jets) -> Jets {
    let blk = z.block();
    let dirs = z.dirs;
    let t = &h.data[..blk];
    let zc: Vec<&[f64]> = z.data.chunks_exact(blk).collect();
    let hc: Vec<&[f64]> = h_adj.data.chunks_exact(blk).collect();
    let mut z_adj = z.like(z.width);
    let mut ac: Vec<&mut [f64]> = z_adj.data.chunks_exact_mut(blk).collect();
    let (a0, rest) = ac.split_at_mut(1);
    let a0 = &mut a0[0][..blk];
    for ((a, &ha), &t) in a0.iter_mut().zip(hc[0]).zip(t) {
        *a = ha * (1.0 - t * t);
    }
    if z.order == Order::Value {
        return z_adj;
    }
    let (first, second) = rest.split_at_mut(dirs);
    for j in 0..dirs {
        let zj = &zc[1 + j][..blk];
        let hj = &hc[1 + j][..blk];
        let aj = &mut first[j][..blk];
        if z.order == Order::Second {
            let zjj = &zc[1 + dirs + j][..blk];
            let hjj = &hc[1 + dirs + j][..blk];
            let ajj = &mut second[j][..blk];
            for idx in 0..blk {
                let t = t[idx];
                let d1 = 1.0 - t * t;
                let d2 = -2.0 * t * d1;
                let d3 = -2.0 * d1 * d1 - 2.0 * t * d2;
                let (zj, zjj, hj, hjj) = (zj[idx], zjj[idx], hj[idx], hjj[idx]);
                aj[idx] = hj * d1 + 2.0 * hjj * d2 * zj;
                ajj[idx] = hjj * d1;
                a0[idx] += hj * d2 * zj + hjj * (d2 * zjj + d3 * zj * zj);
            }
        } else {
            for idx in 0..blk {
                let t = t[idx];
                let d1 = 1.0 - t * t;
                let d2 = -2.0 * t * d1;
                aj[idx] = hj[idx] * d1;
                a0[idx] += hj[idx] * d2 * zj[idx];
            }
        }
    }
    z_adj
}

/// `g = v + s * diff` with `diff = u - v`, channel-wise product rule.
#[inline(always)]
fn gate_forward_impl(s: &Jets, diff: &Jets, v: &Jets) -> Jets {
    let blk = s.block();
    let dirs = s.dirs;
    let sc: Vec<&[f64]> = s.data.chunks_exact(blk).collect();
    let dc: Vec<&[f64]> = diff.data.chunks_exact(blk).collect();
    let mut g = v.clone();
    let mut gc: Vec<&mut [f64]> = g.data.chunks_exact_mut(blk).collect();
    let (s0, d0) = (&sc[0][..blk], &dc[0][..blk]);
    for ((g, &s), &d) in gc[0].iter_mut().zip(s0).zip(d0) {
        *g += s * d;
    }
    if s.order != Order::Value {
        for j in 0..dirs {
            let (sj, dj) = (&sc[1 + j][..blk], &dc[1 + j][..blk]);
            let gj = &mut gc[1 + j][..blk];
            for idx in 0..blk {
                gj[idx] += sj[idx] * d0[idx] + s0[idx] * dj[idx];
            }
        }
    }
    if s.order == Order::Second {
        for j in 0..dirs {
            let (sj, dj) = (&sc[1 + j][..blk], &dc[1 + j][..blk]);
            let (sjj, djj) = (&sc[1 + dirs + j][..blk], &dc[1 + dirs + j][..blk]);
            let gjj = &mut gc[1 + dirs + j][..blk];
            for idx in 0..blk {
                gjj[idx] += sjj[idx] * d0[idx] + 2.0 * sj[idx] * dj[idx] + s0[idx] * djj[idx];
            }
        }
    }
    g
}

/// Adjoint of [`gate_forward`]. Returns the adjoint of `s`; accumulates into
/// the adjoints of `diff` and `v`.
#[inline(always)]
fn gate_backward_impl(g_adj: &Jets, s: &Jets, diff: &Jets, diff_adj: &mut Jets, v_adj: &mut Jets) -> Jets {
    let blk = s.block();
    let dirs = s.dirs;
    for (a, &g) in v_adj.data.iter_mut().zip(&g_adj.data) {
        *a += g;
    }
    let gc: Vec<&[f64]> = g_adj.data.chunks_exact(blk).collect();
    let sc: Vec<&[f64]> = s.data.chunks_exact(blk).collect();
    let dc: Vec<&[f64]> = diff.data.chunks_exact(blk).collect();
    let mut s_adj = s.like(s.width);
    let mut sa: Vec<&mut [f64]> = s_adj.data.chunks_exact_mut(blk).collect();
    let mut da: Vec<&mut [f64]> = diff_adj.data.chunks_exact_mut(blk).collect();
    let (sa0, sa_rest) = sa.split_at_mut(1);
    let (da0, da_rest) = da.split_at_mut(1);
    let (sa0, da0) = (&mut sa0[0][..blk], &mut da0[0][..blk]);
    let (g0, s0, d0) = (&gc[0][..blk], &sc[0][..blk], &dc[0][..blk]);
    for idx in 0..blk {
        sa0[idx] = g0[idx] * d0[idx];
        da0[idx] += g0[idx] * s0[idx];
    }
    if s.order == Order::Value {
        return s_adj;
    }
    let (sa1, sa2) = sa_rest.split_at_mut(dirs);
    let (da1, da2) = da_rest.split_at_mut(dirs);
    for j in 0..dirs {
        let (g1, s1, d1) = (&gc[1 + j][..blk], &sc[1 + j][..blk], &dc[1 + j][..blk]);
        let (saj, daj) = (&mut sa1[j][..blk], &mut da1[j][..blk]);
        for idx in 0..blk {
            sa0[idx] += g1[idx] * d1[idx];
            saj[idx] = g1[idx] * d0[idx];
            da0[idx] += g1[idx] * s1[idx];
            daj[idx] += g1[idx] * s0[idx];
        }
        if s.order == Order::Second {
            let (g2, s2, d2) = (&gc[1 + dirs + j][..blk], &sc[1 + dirs + j][..blk], &dc[1 + dirs + j][..blk]);
            let (sajj, dajj) = (&mut sa2[j][..blk], &mut da2[j][..blk]);
            for idx in 0..blk {
                sa0[idx] += g2[idx] * d2[idx];
                saj[idx] += 2.0 * g2[idx] * d1[idx];
                sajj[idx] = g2[idx] * d0[idx];
                da0[idx] += g2[idx] * s2[idx];
                daj[idx] += 2.0 * g2[idx] * s1[idx];
                dajj[idx] += g2[idx] * s0[idx];
            }
        }
    }
    s_adj
}

/// Compiles an elementwise kernel a second time with AVX2 enabled and picks
/// the variant at runtime. Multiply-adds are never fused, so both variants
/// give bit-identical results.
macro_rules! dispatch {
    ($(fn $name:ident($($arg:ident: $ty:ty),*) -> $ret:ty = $imp:ident;)*) => {$(
        fn $name($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) -> $ret {
                    $imp($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected on this CPU.
                    return unsafe { wide($($arg),*) };
                }
            }
            $imp($($arg),*)
        }
    )*};
}

dispatch! {
    fn tanh_forward(z: &Jets) -> Jets = tanh_forward_impl;
    fn tanh_backward(h_adj: &Jets, z: &Jets, h: &Jets) -> Jets = tanh_backward_impl;
    fn gate_forward(s: &Jets, diff: &Jets, v: &Jets) -> Jets = gate_forward_impl;
    fn gate_backward(g_adj: &Jets, s: &Jets, diff: &Jets, diff_adj: &mut Jets, v_adj: &mut Jets) -> Jets = gate_backward_impl;
}

/// Everything the reverse pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    weights: Vec<Vec<f64>>,
    features: Jets,
    layers: LayerTrace,
    pub output: Jets,
}

#[derive(Debug, Clone)]
enum LayerTrace {
    Mlp {
        pre: Vec<Jets>,
        act: Vec<Jets>,
    },
    Modified {
        zu: Jets,
        u: Jets,
        zv: Jets,
        v: Jets,
        diff: Jets,
        pre: Vec<Jets>,
        gate: Vec<Jets>,
        g: Vec<Jets>,
    },
}

impl Network {
    /// Embedded, normalized input features with their input derivatives.
    fn feature_jets(&self, inputs: &[f64], n: usize, order: Order) -> Jets {
        let spec = &self.spec;
        let d = spec.input_dim;
        let (shift, scale) = (&spec.input_shift, &spec.input_scale);
        match spec.embedding {
            Embedding::None => {
                let mut f = Jets::zeros(order, d, n, d);
                for i in 0..n {
                    for m in 0..d {
                        *f.value_mut(i, m) = (inputs[i * d + m] - shift[m]) * scale[m];
                    }
                }
                if order != Order::Value {
                    for j in 0..d {
                        for i in 0..n {
                            *f.first_mut(j, i, j) = scale[j];
                        }
                    }
                }
                f
            }
            Embedding::Fourier { features: e, .. } => {
                let b = self.params.fourier().expect("fourier matrix present");
                let mut f = Jets::zeros(order, d, n, 2 * e);
                // d phase_k / d x_j is constant across points
                let dphase: Vec<f64> =
                    (0..e * d).map(|km| 2.0 * PI * b[km] * scale[km % d]).collect();
                let mut x = vec![0.0; d];
                for i in 0..n {
                    for m in 0..d {
                        x[m] = (inputs[i * d + m] - shift[m]) * scale[m];
                    }
                    for k in 0..e {
                        let phase: f64 = 2.0 * PI * (0..d).map(|m| b[k * d + m] * x[m]).sum::<f64>();
                        let (sn, cs) = phase.sin_cos();
                        *f.value_mut(i, k) = cs;
                        *f.value_mut(i, e + k) = sn;
                        if order == Order::Value {
                            continue;
                        }
                        for j in 0..d {
                            let p = dphase[k * d + j];
                            *f.first_mut(j, i, k) = -sn * p;
                            *f.first_mut(j, i, e + k) = cs * p;
                            if order == Order::Second {
                                *f.second_mut(j, i, k) = -cs * p * p;
                                *f.second_mut(j, i, e + k) = -sn * p * p;
                            }
                        }
                    }
                }
                f
            }
        }
    }

    fn bias(&self, layer: usize) -> &[f64] {
        let slots = &self.params.affine_layers()[layer];
        &self.params.values[slots.bias..slots.bias + slots.shape.fan_out]
    }

    /// Forward pass over `n = inputs.len() / input_dim` points, row-major
    /// inputs, carrying derivatives up to `order`.
    pub fn forward_jets(&self, inputs: &[f64], order: Order) -> Result<Trace> {
        let d = self.spec.input_dim;
        if !inputs.len().is_multiple_of(d) {
            return Err(Error::Dimension { expected: d, got: inputs.len() % d, context: "batched network input" });
        }
        let n = inputs.len() / d;
        let weights = self.dense_weights();
        let affine = self.params.affine_layers();
        let features = self.feature_jets(inputs, n, order);
        let hidden = self.spec.hidden_layers;
        let (layers, output) = match self.spec.architecture {
            Architecture::Mlp => {
                let mut pre = Vec::with_capacity(hidden);
                let mut act: Vec<Jets> = Vec::with_capacity(hidden);
                for l in 0..hidden {
                    let input = if l == 0 { &features } else { &act[l - 1] };
                    let z = affine_forward(input, &weights[l], self.bias(l), affine[l].shape);
                    act.push(tanh_forward(&z));
                    pre.push(z);
                }
                let out = affine_forward(&act[hidden - 1], &weights[hidden], self.bias(hidden), affine[hidden].shape);
                (LayerTrace::Mlp { pre, act }, out)
            }
            Architecture::ModifiedMlp => {
                let zu = affine_forward(&features, &weights[0], self.bias(0), affine[0].shape);
                let u = tanh_forward(&zu);
                let zv = affine_forward(&features, &weights[1], self.bias(1), affine[1].shape);
                let v = tanh_forward(&zv);
                let mut diff = u.clone();
                for (a, b) in diff.data.iter_mut().zip(&v.data) {
                    *a -= b;
                }
                let mut pre = Vec::with_capacity(hidden);
                let mut gate = Vec::with_capacity(hidden);
                let mut g: Vec<Jets> = Vec::with_capacity(hidden);
                for l in 0..hidden {
                    let input = if l == 0 { &features } else { &g[l - 1] };
                    let f = affine_forward(input, &weights[2 + l], self.bias(2 + l), affine[2 + l].shape);
                    let s = tanh_forward(&f);
                    g.push(gate_forward(&s, &diff, &v));
                    pre.push(f);
                    gate.push(s);
                }
                let last = 2 + hidden;
                let out = affine_forward(&g[hidden - 1], &weights[last], self.bias(last), affine[last].shape);
                (LayerTrace::Modified { zu, u, zv, v, diff, pre, gate, g }, out)
            }
        };
        Ok(Trace { weights, features, layers, output })
    }

    /// Reverse pass: accumulates into `grad` the parameter gradient of the
    /// scalar whose adjoint with respect to `trace.output` is `out_adj`.
    pub fn backward_jets(&self, trace: &Trace, out_adj: &Jets, grad: &mut [f64]) -> Result<()> {
        if out_adj.data.len() != trace.output.data.len() {
            return Err(Error::Dimension {
                expected: trace.output.data.len(),
                got: out_adj.data.len(),
                context: "output adjoint",
            });
        }
        if grad.len() != self.num_params() {
            return Err(Error::Dimension { expected: self.num_params(), got: grad.len(), context: "gradient" });
        }
        let affine = self.params.affine_layers();
        let mut dense: Vec<Vec<f64>> = trace.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let hidden = self.spec.hidden_layers;
        let bias_range = |l: usize| affine[l].bias..affine[l].bias + affine[l].shape.fan_out;
        match &trace.layers {
            LayerTrace::Mlp { pre, act } => {
                let mut adj = affine_backward(
                    &act[hidden - 1],
                    out_adj,
                    &trace.weights[hidden],
                    affine[hidden].shape,
                    &mut dense[hidden],
                    &mut grad[bias_range(hidden)],
                    true,
                )
                .expect("input adjoint requested");
                for l in (0..hidden).rev() {
                    let z_adj = tanh_backward(&adj, &pre[l], &act[l]);
                    let input = if l == 0 { &trace.features } else { &act[l - 1] };
                    let next = affine_backward(
                        input,
                        &z_adj,
                        &trace.weights[l],
                        affine[l].shape,
                        &mut dense[l],
                        &mut grad[bias_range(l)],
                        l > 0,
                    );
                    if let Some(a) = next {
                        adj = a;
                    }
                }
            }
            LayerTrace::Modified { zu, u, zv, v, diff, pre, gate, g } => {
                let last = 2 + hidden;
                let mut adj = affine_backward(
                    &g[hidden - 1],
                    out_adj,
                    &trace.weights[last],
                    affine[last].shape,
                    &mut dense[last],
                    &mut grad[bias_range(last)],
                    true,
                )
                .expect("input adjoint requested");
                let mut diff_adj = diff.like(diff.width);
                let mut v_adj = v.like(v.width);
                for l in (0..hidden).rev() {
                    let s_adj = gate_backward(&adj, &gate[l], diff, &mut diff_adj, &mut v_adj);
                    let f_adj = tanh_backward(&s_adj, &pre[l], &gate[l]);
                    let input = if l == 0 { &trace.features } else { &g[l - 1] };
                    let next = affine_backward(
                        input,
                        &f_adj,
                        &trace.weights[2 + l],
                        affine[2 + l].shape,
                        &mut dense[2 + l],
                        &mut grad[bias_range(2 + l)],
                        l > 0,
                    );
                    if let Some(a) = next {
                        adj = a;
                    }
                }
                // diff = u - v
                let u_adj = diff_adj.clone();
                for (a, d) in v_adj.data.iter_mut().zip(&diff_adj.data) {
                    *a -= d;
                }
                let zu_adj = tanh_backward(&u_adj, zu, u);
                affine_backward(
                    &trace.features,
                    &zu_adj,
                    &trace.weights[0],
                    affine[0].shape,
                    &mut dense[0],
                    &mut grad[bias_range(0)],
                    false,
                );
                let zv_adj = tanh_backward(&v_adj, zv, v);
                affine_backward(
                    &trace.features,
                    &zv_adj,
                    &trace.weights[1],
                    affine[1].shape,
                    &mut dense[1],
                    &mut grad[bias_range(1)],
                    false,
                );
            }
        }
        self.scatter_weight_grads(&dense, grad);
        Ok(())
    }

    /// Output values at `n` points (row-major inputs), `n x output_dim`.
    pub fn predict(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        const CHUNK: usize = 4096;
        let d = self.spec.input_dim;
        let mut out = Vec::with_capacity(inputs.len() / d * self.spec.output_dim);
        for chunk in inputs.chunks(CHUNK * d) {
            let trace = self.forward_jets(chunk, Order::Value)?;
            out.extend_from_slice(trace.output.channel(0));
        }
        Ok(out)
    }
}
