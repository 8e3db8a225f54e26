//! Dense Q-network built by hand: two parallel towers (action advantages
//! and state value), each `affine -> LayerNorm -> tanh` per hidden layer and
//! an affine output, combined as `q = v + a - mean(a)`. Gradients are
//! derived analytically; training uses Adam.
//!
//! All trainable values of one network live in a single flat vector. The
//! order, per tower (action value first, then state value), is: for every
//! hidden layer `weights (fan_in x fan_out, row-major), biases, ln beta,
//! ln gamma`, then the output `weights, biases`. Checkpoints use the same
//! order.

use std::io::{Read, Write};
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance epsilon inside LayerNorm.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: bool,
    pub action_head_out: usize,
    pub state_head_out: usize,
}

impl MlpSpec {
    /// Two hidden layers of 64 with LayerNorm and tanh, three actions.
    pub fn new(input_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            layer_norm: true,
            action_head_out: 3,
            state_head_out: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) || self.action_head_out == 0 {
            return Err(Error::InvalidParameter("network dimensions must be positive".into()));
        }
        if self.state_head_out != 1 {
            return Err(Error::InvalidParameter("the state-value head has one output".into()));
        }
        if self.layer_norm && self.hidden.iter().any(|&h| h < 2) {
            return Err(Error::InvalidParameter("LayerNorm needs hidden width >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    beta: usize,
    gamma: usize,
}

#[derive(Debug, Clone)]
struct Tower {
    hidden: Vec<(Dense, Option<Norm>)>,
    out: Dense,
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub range: Range<usize>,
}

/// Network shape plus the offsets of every parameter block.
#[derive(Debug, Clone)]
pub struct Architecture {
    spec: MlpSpec,
    towers: [Tower; 2],
    len: usize,
    groups: Vec<ParamGroup>,
}

impl Architecture {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut len = 0;
        let mut groups = Vec::new();
        let mut take = |name: String, n: usize| {
            let start = len;
            len += n;
            groups.push(ParamGroup { name, range: start..len });
            start
        };
        let mut build = |tower: &str, out_dim: usize| {
            let mut fan_in = spec.input_dim;
            let mut hidden = Vec::new();
            for (l, &width) in spec.hidden.iter().enumerate() {
                let suffix = if l == 0 { String::new() } else { format!("_{l}") };
                let w = take(format!("{tower}/fully_connected{suffix}/weights"), fan_in * width);
                let b = take(format!("{tower}/fully_connected{suffix}/biases"), width);
                let norm = spec.layer_norm.then(|| Norm {
                    beta: take(format!("{tower}/LayerNorm{suffix}/beta"), width),
                    gamma: take(format!("{tower}/LayerNorm{suffix}/gamma"), width),
                });
                hidden.push((Dense { w, b, fan_in, fan_out: width }, norm));
                fan_in = width;
            }
            let l = spec.hidden.len();
            let w = take(format!("{tower}/fully_connected_{l}/weights"), fan_in * out_dim);
            let b = take(format!("{tower}/fully_connected_{l}/biases"), out_dim);
            Tower { hidden, out: Dense { w, b, fan_in, fan_out: out_dim } }
        };
        let action = build("action_value", spec.action_head_out);
        let state = build("state_value", spec.state_head_out);
        Ok(Architecture { spec, towers: [action, state], len, groups })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Trainable scalars in one network.
    pub fn trainable_len(&self) -> usize {
        self.len
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn n_actions(&self) -> usize {
        self.spec.action_head_out
    }

    fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut values = vec![0.0; self.len];
        for tower in &self.towers {
            let dense = tower.hidden.iter().map(|(d, _)| d).chain(std::iter::once(&tower.out));
            for d in dense {
                let bound = (6.0 / (d.fan_in + d.fan_out) as f64).sqrt();
                for w in &mut values[d.w..d.w + d.fan_in * d.fan_out] {
                    *w = rng.random_range(-bound..bound);
                }
            }
            for (_, norm) in &tower.hidden {
                if let Some(n) = norm {
                    let width = n.gamma - n.beta;
                    values[n.gamma..n.gamma + width].fill(1.0);
                }
            }
        }
        values
    }

    pub fn new_cache(&self) -> ForwardCache {
        ForwardCache {
            towers: [TowerCache::default(), TowerCache::default()],
            q: Vec::new(),
            batch: 0,
        }
    }

    /// Forward pass for one input; see [`Architecture::forward_batch`].
    pub fn forward<'c>(&self, params: &[f64], x: &[f64], cache: &'c mut ForwardCache) -> Result<&'c [f64]> {
        self.forward_batch(params, x, 1, cache)
    }

    /// Forward pass over `batch` inputs stored row-major in `x`. Returns the
    /// `batch x n_actions` Q matrix; the cache keeps every intermediate for
    /// [`Architecture::backward`].
    pub fn forward_batch<'c>(&self, params: &[f64], x: &[f64], batch: usize, cache: &'c mut ForwardCache) -> Result<&'c [f64]> {
        if batch == 0 || x.len() != batch * self.spec.input_dim {
            return Err(Error::Shape { expected: batch.max(1) * self.spec.input_dim, got: x.len() });
        }
        debug_assert_eq!(params.len(), self.len);
        cache.batch = batch;
        for (tower, tc) in self.towers.iter().zip(cache.towers.iter_mut()) {
            forward_tower(tower, params, x, batch, tc);
        }
        let n_a = self.spec.action_head_out;
        cache.q.resize(batch * n_a, 0.0);
        let a = &cache.towers[0].out;
        let v = &cache.towers[1].out;
        for r in 0..batch {
            let row = &a[r * n_a..(r + 1) * n_a];
            let mean_a = row.iter().sum::<f64>() / n_a as f64;
            for (q, a) in cache.q[r * n_a..(r + 1) * n_a].iter_mut().zip(row) {
                *q = v[r] + a - mean_a;
            }
        }
        Ok(&cache.q)
    }

    /// Accumulates `dL/dparams` into `grads` given `dL/dq` (same shape as the
    /// Q matrix) for the cached pass.
    pub fn backward(&self, params: &[f64], cache: &mut ForwardCache, dq: &[f64], grads: &mut [f64]) {
        let n_a = self.spec.action_head_out;
        let batch = cache.batch;
        debug_assert_eq!(dq.len(), batch * n_a);
        debug_assert_eq!(grads.len(), self.len);
        let mut da = vec![0.0; batch * n_a];
        let mut dv = vec![0.0; batch];
        for r in 0..batch {
            let row = &dq[r * n_a..(r + 1) * n_a];
            let sum: f64 = row.iter().sum();
            let mean = sum / n_a as f64;
            for (d, g) in da[r * n_a..(r + 1) * n_a].iter_mut().zip(row) {
                *d = g - mean;
            }
            dv[r] = sum;
        }
        let [c0, c1] = &mut cache.towers;
        backward_tower(&self.towers[0], params, c0, batch, &da, grads);
        backward_tower(&self.towers[1], params, c1, batch, &dv, grads);
    }
}

#[derive(Debug, Clone, Default)]
struct TowerCache {
    /// Per hidden layer, `batch x fan_in` inputs.
    inputs: Vec<Vec<f64>>,
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    out: Vec<f64>,
    grad: Vec<Vec<f64>>,
}

/// Activations of one forward pass, reused across calls.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    towers: [TowerCache; 2],
    q: Vec<f64>,
    batch: usize,
}

impl ForwardCache {
    /// `batch x n_actions` Q values of the last pass.
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// Raw action-tower outputs.
    pub fn advantages(&self) -> &[f64] {
        &self.towers[0].out
    }

    /// Raw state-value output of the first input.
    pub fn value(&self) -> f64 {
        self.towers[1].out[0]
    }
}

/// `c = a (m x k) * b (k x n) + beta * c`, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches, and
    // `c` is a distinct, exclusively borrowed buffer of at least m*n values.
    unsafe {
        matrixmultiply::dgemm(
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

/// `out = input * W + b` for `batch` rows.
fn affine(params: &[f64], d: &Dense, input: &[f64], batch: usize, out: &mut Vec<f64>) {
    out.resize(batch * d.fan_out, 0.0);
    let bias = &params[d.b..d.b + d.fan_out];
    for row in out.chunks_exact_mut(d.fan_out) {
        row.copy_from_slice(bias);
    }
    let w = &params[d.w..d.w + d.fan_in * d.fan_out];
    gemm(batch, d.fan_in, d.fan_out, input, d.fan_in, 1, w, d.fan_out, 1, 1.0, out);
}

/// `grad_w += input^T * dz`, `grad_b += colsum(dz)`, and, when `dx` is
/// given, `dx = dz * W^T`.
fn affine_backward(params: &[f64], d: &Dense, input: &[f64], dz: &[f64], batch: usize, grads: &mut [f64], dx: Option<&mut Vec<f64>>) {
    for row in dz.chunks_exact(d.fan_out) {
        for (g, v) in grads[d.b..d.b + d.fan_out].iter_mut().zip(row) {
            *g += v;
        }
    }
    let gw = &mut grads[d.w..d.w + d.fan_in * d.fan_out];
    gemm(d.fan_in, batch, d.fan_out, input, 1, d.fan_in, dz, d.fan_out, 1, 1.0, gw);
    if let Some(dx) = dx {
        dx.resize(batch * d.fan_in, 0.0);
        let w = &params[d.w..d.w + d.fan_in * d.fan_out];
        gemm(batch, d.fan_out, d.fan_in, dz, d.fan_out, 1, w, 1, d.fan_out, 0.0, dx);
    }
}

/// `1 - 2 / (e^{2x} + 1)`: absolute error about 2e-16 and several times
/// cheaper than the libm routine. Saturates correctly when `e^{2x}` over- or
/// underflows.
#[inline]
fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// Normalizes `z` into `xhat` and returns the inverse standard deviation.
#[inline]
fn normalize(z: &[f64], xhat: &mut [f64]) -> f64 {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    for (h, v) in xhat.iter_mut().zip(z) {
        *h = (v - mean) * inv_std;
    }
    inv_std
}

/// `gamma * (x - mean) / sqrt(var + 1e-5) + beta` with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut xhat = vec![0.0; x.len()];
    normalize(x, &mut xhat);
    xhat.iter().zip(gamma).zip(beta).map(|((h, g), b)| g * h + b).collect()
}

fn forward_tower(tower: &Tower, params: &[f64], x: &[f64], batch: usize, tc: &mut TowerCache) {
    let n_hidden = tower.hidden.len();
    tc.inputs.resize_with(n_hidden, Vec::new);
    tc.xhat.resize_with(n_hidden, Vec::new);
    tc.inv_std.resize_with(n_hidden, Vec::new);
    tc.act.resize_with(n_hidden, Vec::new);
    tc.grad.resize_with(n_hidden, Vec::new);
    for (l, (dense, norm)) in tower.hidden.iter().enumerate() {
        let mut input = std::mem::take(&mut tc.inputs[l]);
        input.clear();
        input.extend_from_slice(if l == 0 { x } else { &tc.act[l - 1] });
        let mut act = std::mem::take(&mut tc.act[l]);
        affine(params, dense, &input, batch, &mut act);
        let width = dense.fan_out;
        if let Some(n) = norm {
            let xhat = &mut tc.xhat[l];
            xhat.resize(batch * width, 0.0);
            let inv_std = &mut tc.inv_std[l];
            inv_std.resize(batch, 0.0);
            let gamma = &params[n.gamma..n.gamma + width];
            let beta = &params[n.beta..n.beta + width];
            for ((z, h), s) in act.chunks_exact_mut(width).zip(xhat.chunks_exact_mut(width)).zip(inv_std.iter_mut()) {
                *s = normalize(z, h);
                for (((a, h), g), b) in z.iter_mut().zip(h.iter()).zip(gamma).zip(beta) {
                    *a = tanh(g * h + b);
                }
            }
        } else {
            for a in act.iter_mut() {
                *a = tanh(*a);
            }
        }
        tc.inputs[l] = input;
        tc.act[l] = act;
    }
    let input: &[f64] = if n_hidden == 0 { x } else { &tc.act[n_hidden - 1] };
    let mut out = std::mem::take(&mut tc.out);
    affine(params, &tower.out, input, batch, &mut out);
    tc.out = out;
}

fn backward_tower(tower: &Tower, params: &[f64], tc: &mut TowerCache, batch: usize, d_out: &[f64], grads: &mut [f64]) {
    let n_hidden = tower.hidden.len();
    let mut dh = std::mem::take(&mut tc.grad[n_hidden - 1]);
    affine_backward(params, &tower.out, &tc.act[n_hidden - 1], d_out, batch, grads, Some(&mut dh));
    for l in (0..n_hidden).rev() {
        let (dense, norm) = &tower.hidden[l];
        let width = dense.fan_out;
        // dh becomes dz for this layer.
        for (g, a) in dh.iter_mut().zip(&tc.act[l]) {
            *g *= 1.0 - a * a;
        }
        if let Some(n) = norm {
            debug_assert_eq!(n.gamma, n.beta + width);
            let gamma = &params[n.gamma..n.gamma + width];
            let xhat = &tc.xhat[l];
            {
                let (g_beta, g_gamma) = grads[n.beta..n.gamma + width].split_at_mut(width);
                for (dy, h) in dh.chunks_exact(width).zip(xhat.chunks_exact(width)) {
                    for (((gb, gg), d), x) in g_beta.iter_mut().zip(g_gamma.iter_mut()).zip(dy).zip(h) {
                        *gb += d;
                        *gg += d * x;
                    }
                }
            }
            let nw = width as f64;
            for ((dy, h), s) in dh.chunks_exact_mut(width).zip(xhat.chunks_exact(width)).zip(&tc.inv_std[l]) {
                for (d, g) in dy.iter_mut().zip(gamma) {
                    *d *= g;
                }
                let mean_d = dy.iter().sum::<f64>() / nw;
                let mean_dh = dy.iter().zip(h).map(|(d, x)| d * x).sum::<f64>() / nw;
                for (d, x) in dy.iter_mut().zip(h) {
                    *d = s * (*d - mean_d - x * mean_dh);
                }
            }
        }
        let mut next = if l > 0 { Some(std::mem::take(&mut tc.grad[l - 1])) } else { None };
        affine_backward(params, dense, &tc.inputs[l], &dh, batch, grads, next.as_mut());
        tc.grad[l] = dh;
        if let Some(n) = next {
            dh = n;
        } else {
            break;
        }
    }
}

/// Trainable values of one network.
#[derive(Debug, Clone)]
pub struct NetParams {
    arch: Arc<Architecture>,
    pub values: Vec<f64>,
}

impl PartialEq for NetParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch.spec == other.arch.spec && self.values == other.values
    }
}

impl NetParams {
    /// Glorot-uniform weights, zero biases, LayerNorm gain 1 and offset 0.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let arch = Arc::new(Architecture::new(spec)?);
        let values = arch.init(rng);
        Ok(NetParams { arch, values })
    }

    pub fn from_values(arch: Arc<Architecture>, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.trainable_len() {
            return Err(Error::Shape { expected: arch.trainable_len(), got: values.len() });
        }
        Ok(NetParams { arch, values })
    }

    pub fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.arch.spec
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn new_cache(&self) -> ForwardCache {
        self.arch.new_cache()
    }

    pub fn forward_q<'c>(&self, x: &[f64], cache: &'c mut ForwardCache) -> Result<&'c [f64]> {
        self.arch.forward(&self.values, x, cache)
    }

    /// Q matrix for `batch` row-major inputs.
    pub fn forward_batch<'c>(&self, x: &[f64], batch: usize, cache: &'c mut ForwardCache) -> Result<&'c [f64]> {
        self.arch.forward_batch(&self.values, x, batch, cache)
    }

    /// Convenience forward without a caller-held cache.
    pub fn q_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut cache = self.new_cache();
        Ok(self.forward_q(x, &mut cache)?.to_vec())
    }

    /// Gradients of the cached pass, as a fresh vector.
    pub fn backward(&self, cache: &mut ForwardCache, dq: &[f64]) -> Vec<f64> {
        let mut grads = vec![0.0; self.values.len()];
        self.arch.backward(&self.values, cache, dq, &mut grads);
        grads
    }

    pub fn backward_into(&self, cache: &mut ForwardCache, dq: &[f64], grads: &mut [f64]) {
        self.arch.backward(&self.values, cache, dq, grads);
    }

    /// Zero both towers' output layers (weights and biases).
    pub fn zero_output_layers(&mut self) {
        for t in &self.arch.towers {
            let d = t.out;
            self.values[d.w..d.w + d.fan_in * d.fan_out].fill(0.0);
            self.values[d.b..d.b + d.fan_out].fill(0.0);
        }
    }

    /// Overwrite the action tower's output biases.
    pub fn set_advantage_bias(&mut self, bias: &[f64]) {
        let d = self.arch.towers[0].out;
        self.values[d.b..d.b + d.fan_out].copy_from_slice(bias);
    }

    /// Overwrite the state-value output bias.
    pub fn set_value_bias(&mut self, bias: f64) {
        let d = self.arch.towers[1].out;
        self.values[d.b] = bias;
    }
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape { expected: params.len(), got: grads.len().min(state.m.len()) });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Online network, its target copy, the Adam state, and the frozen `eps`
/// scalar (kept only so stored parameter counts include it; it takes no
/// part in any computation and is never trained).
#[derive(Debug, Clone)]
pub struct QNetwork {
    pub online: NetParams,
    pub target: NetParams,
    pub eps: f64,
    pub adam: AdamState,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let online = NetParams::init(spec, rng)?;
        Ok(Self::from_online(online))
    }

    pub fn from_online(online: NetParams) -> Self {
        let target = online.clone();
        let adam = AdamState::new(online.len());
        QNetwork { online, target, eps: 1.0, adam }
    }

    /// Every stored scalar: online, target, and `eps`.
    pub fn parameter_count(&self) -> usize {
        self.online.len() + self.target.len() + 1
    }

    pub fn hard_update_target(&mut self) {
        self.target.values.copy_from_slice(&self.online.values);
    }

    pub fn apply_gradients(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        adam_step(&mut self.online.values, grads, &mut self.adam, lr)
    }

    /// Binary checkpoint; see [`QNetwork::read_from`] for the layout.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let spec = self.online.spec();
        out.write_all(MAGIC)?;
        out.write_all(&ENDIAN_TAG.to_le_bytes())?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let header = [spec.input_dim, spec.hidden.len()]
            .into_iter()
            .chain(spec.hidden.iter().copied())
            .chain([spec.action_head_out, spec.state_head_out, usize::from(spec.layer_norm)]);
        for v in header {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(&(self.online.len() as u64).to_le_bytes())?;
        for v in self.online.values.iter().chain(&self.target.values).chain([&self.eps]) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Layout, all integers little-endian:
    ///
    /// ```text
    /// b"DQTN"  u32 endian tag 0x01020304  u32 version
    /// u64 input_dim  u64 n_hidden  u64 hidden[n_hidden]
    /// u64 action_out  u64 state_out  u64 layer_norm
    /// u64 n  f64 online[n]  f64 target[n]  f64 eps
    /// ```
    ///
    /// The Adam state is not stored; a loaded network starts with fresh moments.
    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let tag = read_u32(&mut input)?;
        if tag != ENDIAN_TAG {
            return Err(Error::Format(format!("unexpected endianness tag {tag:#x}")));
        }
        let version = read_u32(&mut input)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let input_dim = read_u64(&mut input)? as usize;
        let n_hidden = read_u64(&mut input)? as usize;
        if n_hidden > 64 {
            return Err(Error::Format(format!("implausible hidden layer count {n_hidden}")));
        }
        let hidden = (0..n_hidden).map(|_| read_u64(&mut input).map(|v| v as usize)).collect::<Result<_>>()?;
        let action_head_out = read_u64(&mut input)? as usize;
        let state_head_out = read_u64(&mut input)? as usize;
        let layer_norm = read_u64(&mut input)? != 0;
        let spec = MlpSpec { input_dim, hidden, activation: Activation::Tanh, layer_norm, action_head_out, state_head_out };
        let arch = Arc::new(Architecture::new(spec)?);
        let n = read_u64(&mut input)? as usize;
        if n != arch.trainable_len() {
            return Err(Error::Format(format!("{n} values for a network of {}", arch.trainable_len())));
        }
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; len * 8];
            input.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let online = read_vec(n)?;
        let target = read_vec(n)?;
        let eps = read_vec(1)?[0];
        let online = NetParams::from_values(arch.clone(), online)?;
        let target = NetParams::from_values(arch, target)?;
        let adam = AdamState::new(n);
        Ok(QNetwork { online, target, eps, adam })
    }
}

const MAGIC: &[u8; 4] = b"DQTN";
const ENDIAN_TAG: u32 = 0x0102_0304;
const FORMAT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn random_input(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 99);
        (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn parameter_counts() {
        let mut rng = stream_rng(0, 0);
        assert_eq!(QNetwork::new(MlpSpec::new(180), &mut rng).unwrap().parameter_count(), 64_521);
        assert_eq!(QNetwork::new(MlpSpec::new(4500), &mut rng).unwrap().parameter_count(), 1_170_441);
    }

    #[test]
    fn group_names_follow_checkpoint_order() {
        let arch = Architecture::new(MlpSpec::new(180)).unwrap();
        let names: Vec<&str> = arch.groups().iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names[0], "action_value/fully_connected/weights");
        assert_eq!(names[2], "action_value/LayerNorm/beta");
        assert_eq!(names[9], "action_value/fully_connected_2/biases");
        assert_eq!(names[19], "state_value/fully_connected_2/biases");
        assert_eq!(arch.groups()[0].range.len(), 180 * 64);
        assert_eq!(arch.groups().last().unwrap().range.end, arch.trainable_len());
    }

    #[test]
    fn init_is_seeded_and_well_formed() {
        let a = NetParams::init(MlpSpec::new(10), &mut stream_rng(5, 0)).unwrap();
        let b = NetParams::init(MlpSpec::new(10), &mut stream_rng(5, 0)).unwrap();
        assert_eq!(a, b);
        for g in a.arch().groups() {
            let vals = &a.values[g.range.clone()];
            if g.name.ends_with("biases") || g.name.ends_with("beta") {
                assert!(vals.iter().all(|&v| v == 0.0), "{}", g.name);
            } else if g.name.ends_with("gamma") {
                assert!(vals.iter().all(|&v| v == 1.0));
            } else {
                let fan: usize = if g.name.contains("fully_connected/") { 10 + 64 } else { 64 + 64 };
                let bound = (6.0 / fan as f64).sqrt();
                assert!(vals.iter().all(|v| v.abs() <= bound + 1e-12 || g.name.contains("_2")));
            }
        }
    }

    #[test]
    fn tanh_matches_libm() {
        for k in -4000..=4000 {
            let x = k as f64 * 0.01;
            assert!((tanh(x) - x.tanh()).abs() < 1e-15, "{x}");
        }
        assert_eq!(tanh(800.0), 1.0);
        assert_eq!(tanh(-800.0), -1.0);
        assert!(tanh(f64::NAN).is_nan());
    }

    #[test]
    fn layer_norm_cases() {
        let y = layer_norm(&[3.0; 5], &[1.0; 5], &[0.0; 5]);
        assert!(y.iter().all(|&v| v == 0.0));
        let y = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]);
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - expected).abs() < 1e-15 && (y[1] + expected).abs() < 1e-15);
        let y = layer_norm(&[0.3, 7.0, -2.0], &[0.0; 3], &[0.5, -1.0, 2.0]);
        assert_eq!(y, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_output_layers_give_zero_q() {
        let mut p = NetParams::init(MlpSpec::new(6), &mut stream_rng(1, 0)).unwrap();
        p.zero_output_layers();
        assert_eq!(p.q_values(&[0.0; 6]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn dueling_identities() {
        let mut p = NetParams::init(MlpSpec::new(8), &mut stream_rng(2, 0)).unwrap();
        let x = random_input(8, 1);
        let mut cache = p.new_cache();
        let q = p.forward_q(&x, &mut cache).unwrap().to_vec();
        let v = cache.value();
        let mean_gap = q.iter().map(|qi| qi - v).sum::<f64>() / 3.0;
        assert!(mean_gap.abs() < 1e-12);

        // shifting every advantage leaves q alone
        let d = p.arch().towers[0].out;
        for b in &mut p.values[d.b..d.b + 3] {
            *b += 5.0;
        }
        let shifted = p.q_values(&x).unwrap();
        for (a, b) in q.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        // shifting v shifts all q equally
        p.set_value_bias(p.values[p.arch().towers[1].out.b] + 3.0);
        let moved = p.q_values(&x).unwrap();
        for (a, b) in q.iter().zip(&moved) {
            assert!((b - a - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = NetParams::init(MlpSpec::new(8), &mut stream_rng(2, 0)).unwrap();
        assert!(matches!(p.q_values(&[0.0; 7]), Err(Error::Shape { expected: 8, got: 7 })));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let p = NetParams::init(MlpSpec::new(12), &mut stream_rng(3, 0)).unwrap();
        let mut cache = p.new_cache();
        p.forward_q(&random_input(12, 2), &mut cache).unwrap();
        let g = p.backward(&mut cache, &[0.0; 3]);
        assert!(g.iter().all(|&v| v == 0.0));
        // eps is not a trainable parameter
        assert_eq!(g.len(), QNetwork::from_online(p).parameter_count() / 2);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn gradients_match_finite_differences() {
        let mut p = NetParams::init(MlpSpec::new(7), &mut stream_rng(4, 0)).unwrap();
        // move LayerNorm params off their trivial initial values
        let mut rng = stream_rng(4, 1);
        for g in p.arch().clone().groups() {
            if g.name.contains("LayerNorm") || g.name.ends_with("biases") {
                for v in &mut p.values[g.range.clone()] {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
        }
        let x = random_input(7, 3);
        let dq = [0.3, -1.1, 0.7];
        let loss = |p: &NetParams| -> f64 {
            p.q_values(&x).unwrap().iter().zip(&dq).map(|(q, d)| q * d).sum()
        };
        let mut cache = p.new_cache();
        p.forward_q(&x, &mut cache).unwrap();
        let analytic = p.backward(&mut cache, &dq);
        let h = 1e-5;
        for i in 0..p.len() {
            let orig = p.values[i];
            p.values[i] = orig + h;
            let up = loss(&p);
            p.values[i] = orig - h;
            let down = loss(&p);
            p.values[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: {numeric} vs {}", analytic[i]);
        }
    }

    #[test]
    fn batched_pass_matches_rows() {
        let p = NetParams::init(MlpSpec::new(6), &mut stream_rng(9, 0)).unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|k| random_input(6, 20 + k)).collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut cache = p.new_cache();
        let q = p.forward_batch(&flat, 5, &mut cache).unwrap().to_vec();
        let dq: Vec<f64> = (0..15).map(|k| (k as f64 * 0.37).sin()).collect();
        let g = p.backward(&mut cache, &dq);
        let mut g_rows = vec![0.0; p.len()];
        for (k, row) in rows.iter().enumerate() {
            let single = p.q_values(row).unwrap();
            for a in 0..3 {
                assert!((single[a] - q[3 * k + a]).abs() < 1e-12);
            }
            let mut c = p.new_cache();
            p.forward_q(row, &mut c).unwrap();
            p.backward_into(&mut c, &dq[3 * k..3 * k + 3], &mut g_rows);
        }
        for (a, b) in g.iter().zip(&g_rows) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn adam_cases() {
        let mut p = vec![0.5, -0.2];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.001).unwrap();
        assert_eq!(p, vec![0.5, -0.2]);

        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 0.001).unwrap();
        assert!((p[0] + 0.001).abs() < 1e-10, "{}", p[0]);

        let run = || {
            let mut p = vec![1.0, 2.0, 3.0];
            let mut s = AdamState::new(3);
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|v| v * (k as f64 + 1.0).sin()).collect();
                adam_step(&mut p, &g, &mut s, 0.01).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
        assert!(adam_step(&mut [0.0], &[1.0, 2.0], &mut AdamState::new(1), 0.1).is_err());
    }

    #[test]
    fn target_copy() {
        let mut net = QNetwork::new(MlpSpec::new(5), &mut stream_rng(6, 0)).unwrap();
        assert_eq!(net.online, net.target);
        let snapshot = net.online.clone();
        let g = vec![1.0; net.online.len()];
        net.apply_gradients(&g, 0.01).unwrap();
        assert_eq!(net.target, snapshot);
        net.hard_update_target();
        let once = net.target.clone();
        net.hard_update_target();
        assert_eq!(net.target, once);
        let x = random_input(5, 8);
        assert_eq!(net.online.q_values(&x).unwrap(), net.target.q_values(&x).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut net = QNetwork::new(MlpSpec::new(9), &mut stream_rng(7, 0)).unwrap();
        net.apply_gradients(&vec![0.3; net.online.len()], 0.01).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        let back = QNetwork::read_from(&buf[..]).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.online.values), bits(&net.online.values));
        assert_eq!(bits(&back.target.values), bits(&net.target.values));
        assert_eq!(back.eps, 1.0);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);

        assert!(QNetwork::read_from(&buf[..20]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(QNetwork::read_from(&bad[..]), Err(Error::Format(_))));
    }
}
