//! A small layered network with hand-written backpropagation.
//!
//! Parameters and batch-norm running statistics live in two flat vectors; the
//! layer list only holds offsets into them. `forward` is pure: it returns a
//! [`Trace`] that `backward` consumes and that [`Network::commit_running_stats`]
//! uses to apply the train-mode statistic update.

mod kernels;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    in_c: usize,
    out_c: usize,
    k: usize,
    pad: usize,
    weight: usize,
    bias: Option<usize>,
    tap: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    c: usize,
    gamma: usize,
    beta: usize,
    /// Offset of `[mean; c]` followed by `[var; c]` in the running vector.
    stats: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    inp: usize,
    out: usize,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Conv(Conv),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    Linear(Linear),
    /// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

enum Cache {
    Conv { input: Tensor },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Relu { output: Tensor },
    MaxPool { arg: Vec<usize>, in_shape: Vec<usize> },
    Reshape { in_shape: Vec<usize> },
    GlobalAvgPool { in_shape: Vec<usize> },
    Linear { input: Tensor },
    Residual { body: Vec<Cache>, shortcut: Vec<Cache>, output: Tensor },
}

struct BnUpdate {
    stats: usize,
    mean: Vec<f64>,
    var_unbiased: Vec<f64>,
}

/// Everything a forward pass recorded.
pub struct Trace {
    caches: Vec<Cache>,
    taps: Vec<Option<Tensor>>,
    bn_updates: Vec<BnUpdate>,
    mode: Mode,
}

impl Trace {
    /// Post-convolution activations indexed by tap id (one per conv layer,
    /// in construction order).
    pub fn taps(&self) -> &[Option<Tensor>] {
        &self.taps
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Network structure plus flat parameter and running-statistic storage.
#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: [usize; 3],
    output_dim: usize,
    params: Vec<f64>,
    running: Vec<f64>,
    num_taps: usize,
    /// Running-stat offset of the batch norm consuming each tap, if any.
    tap_norms: Vec<Option<(usize, usize)>>,
    head: std::ops::Range<usize>,
}

impl Network {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn running(&self) -> &[f64] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [f64] {
        &mut self.running
    }

    pub fn num_taps(&self) -> usize {
        self.num_taps
    }

    pub fn has_batch_norm(&self) -> bool {
        !self.running.is_empty()
    }

    /// Parameter range of the final linear layer.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.head.clone()
    }

    /// For each tap, `(offset, channels)` of the batch norm that normalizes it.
    pub fn tap_norms(&self) -> &[Option<(usize, usize)>] {
        &self.tap_norms
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Trace)> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.input_shape {
            return Err(Error::Shape(format!(
                "network expects inputs [N, {}, {}, {}], got {:?}",
                self.input_shape[0],
                self.input_shape[1],
                self.input_shape[2],
                x.shape()
            )));
        }
        let mut state = FwdState {
            params: &self.params,
            running: &self.running,
            mode,
            taps: vec![None; self.num_taps],
            bn_updates: Vec::new(),
        };
        let (out, caches) = forward_layers(&self.layers, x.clone(), &mut state)?;
        Ok((
            out,
            Trace {
                caches,
                taps: state.taps,
                bn_updates: state.bn_updates,
                mode,
            },
        ))
    }

    /// Backpropagates `grad_logits` (and optional extra gradients injected at
    /// tap outputs) to the input. Parameter gradients are accumulated into
    /// `param_grads` when provided.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_logits: Option<&Tensor>,
        tap_grads: &[Option<Tensor>],
        param_grads: Option<&mut [f64]>,
    ) -> Result<Tensor> {
        let start = match grad_logits {
            Some(g) => g.clone(),
            None => {
                // Zero seed shaped like the output.
                let n = trace
                    .taps
                    .iter()
                    .flatten()
                    .next()
                    .map(|t| t.batch())
                    .unwrap_or(0);
                Tensor::zeros(&[n, self.output_dim])
            }
        };
        if let Some(pg) = &param_grads {
            if pg.len() != self.params.len() {
                return Err(Error::Shape("parameter gradient length".into()));
            }
        }
        let mut st = BwdState {
            params: &self.params,
            tap_grads,
            grads: param_grads,
        };
        backward_layers(&self.layers, &trace.caches, start, &mut st)
    }

    /// Applies the running-statistic update recorded by a train-mode forward.
    pub fn commit_running_stats(&mut self, trace: &Trace) {
        for u in &trace.bn_updates {
            let c = u.mean.len();
            for ch in 0..c {
                let m = &mut self.running[u.stats + ch];
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * u.mean[ch];
                let v = &mut self.running[u.stats + c + ch];
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * u.var_unbiased[ch];
            }
        }
    }

    /// Zeroes the final linear layer (weights and bias).
    pub fn zero_head(&mut self) {
        let r = self.head_range();
        self.params[r].iter_mut().for_each(|p| *p = 0.0);
    }
}

struct FwdState<'a> {
    params: &'a [f64],
    running: &'a [f64],
    mode: Mode,
    taps: Vec<Option<Tensor>>,
    bn_updates: Vec<BnUpdate>,
}

struct BwdState<'a, 'g> {
    params: &'a [f64],
    tap_grads: &'a [Option<Tensor>],
    grads: Option<&'g mut [f64]>,
}

fn forward_layers(
    layers: &[Layer],
    mut x: Tensor,
    st: &mut FwdState<'_>,
) -> Result<(Tensor, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, cache) = forward_layer(layer, x, st)?;
        caches.push(cache);
        x = y;
    }
    Ok((x, caches))
}

fn forward_layer(layer: &Layer, x: Tensor, st: &mut FwdState<'_>) -> Result<(Tensor, Cache)> {
    match layer {
        Layer::Conv(cv) => {
            let (n, c, h, w) = x.dims4()?;
            if c != cv.in_c {
                return Err(Error::Shape(format!("conv expects {} channels, got {c}", cv.in_c)));
            }
            let g = geom(cv, h, w);
            let wlen = cv.out_c * cv.in_c * cv.k * cv.k;
            let out = kernels::conv_forward(
                &g,
                n,
                x.data(),
                &st.params[cv.weight..cv.weight + wlen],
                cv.bias.map(|b| &st.params[b..b + cv.out_c]),
            );
            let y = Tensor::from_vec(&[n, cv.out_c, g.out_h(), g.out_w()], out)?;
            st.taps[cv.tap] = Some(y.clone());
            Ok((y, Cache::Conv { input: x }))
        }
        Layer::BatchNorm(bn) => {
            let (n, c, h, w) = x.dims4()?;
            if c != bn.c {
                return Err(Error::Shape(format!("batch norm expects {} channels, got {c}", bn.c)));
            }
            let hw = h * w;
            let m = (n * hw) as f64;
            let (mean, var) = if st.mode == Mode::Train {
                let (mean, var) = channel_moments(x.data(), n, c, hw);
                let factor = if n * hw > 1 { m / (m - 1.0) } else { 1.0 };
                st.bn_updates.push(BnUpdate {
                    stats: bn.stats,
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|v| v * factor).collect(),
                });
                (mean, var)
            } else {
                (
                    st.running[bn.stats..bn.stats + c].to_vec(),
                    st.running[bn.stats + c..bn.stats + 2 * c].to_vec(),
                )
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let gamma = &st.params[bn.gamma..bn.gamma + c];
            let beta = &st.params[bn.beta..bn.beta + c];
            let mut xhat = vec![0.0; x.len()];
            let mut y = vec![0.0; x.len()];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for p in base..base + hw {
                        let v = (x.data()[p] - mean[ch]) * inv_std[ch];
                        xhat[p] = v;
                        y[p] = gamma[ch] * v + beta[ch];
                    }
                }
            }
            Ok((
                Tensor::from_vec(x.shape(), y)?,
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    batch: st.mode == Mode::Train,
                },
            ))
        }
        Layer::Relu => {
            let mut y = x;
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            Ok((y.clone(), Cache::Relu { output: y }))
        }
        Layer::MaxPool2 => {
            let (n, c, h, w) = x.dims4()?;
            let (out, arg) = kernels::maxpool2_forward(n, c, h, w, x.data());
            Ok((
                Tensor::from_vec(&[n, c, h / 2, w / 2], out)?,
                Cache::MaxPool {
                    arg,
                    in_shape: x.shape().to_vec(),
                },
            ))
        }
        Layer::GlobalAvgPool => {
            let (n, c, h, w) = x.dims4()?;
            let hw = h * w;
            let out: Vec<f64> = x
                .data()
                .chunks(hw)
                .map(|p| p.iter().sum::<f64>() / hw as f64)
                .collect();
            Ok((
                Tensor::from_vec(&[n, c], out)?,
                Cache::GlobalAvgPool {
                    in_shape: x.shape().to_vec(),
                },
            ))
        }
        Layer::Flatten => {
            let in_shape = x.shape().to_vec();
            let n = x.batch();
            let s = x.sample_len();
            Ok((x.reshape(&[n, s])?, Cache::Reshape { in_shape }))
        }
        Layer::Linear(l) => {
            let (n, inp) = x.dims2()?;
            if inp != l.inp {
                return Err(Error::Shape(format!("linear expects {} features, got {inp}", l.inp)));
            }
            let y = kernels::linear_forward(
                n,
                l.inp,
                l.out,
                x.data(),
                &st.params[l.weight..l.weight + l.inp * l.out],
                &st.params[l.bias..l.bias + l.out],
            );
            Ok((Tensor::from_vec(&[n, l.out], y)?, Cache::Linear { input: x }))
        }
        Layer::Residual { body, shortcut } => {
            let (b, body_c) = forward_layers(body, x.clone(), st)?;
            let (s, short_c) = forward_layers(shortcut, x, st)?;
            let mut y = b;
            y.add_assign(&s)?;
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            Ok((
                y.clone(),
                Cache::Residual {
                    body: body_c,
                    shortcut: short_c,
                    output: y,
                },
            ))
        }
    }
}

fn backward_layers(
    layers: &[Layer],
    caches: &[Cache],
    mut grad: Tensor,
    st: &mut BwdState<'_, '_>,
) -> Result<Tensor> {
    for (layer, cache) in layers.iter().zip(caches).rev() {
        grad = backward_layer(layer, cache, grad, st)?;
    }
    Ok(grad)
}

fn backward_layer(
    layer: &Layer,
    cache: &Cache,
    mut dy: Tensor,
    st: &mut BwdState<'_, '_>,
) -> Result<Tensor> {
    match (layer, cache) {
        (Layer::Conv(cv), Cache::Conv { input }) => {
            if let Some(Some(extra)) = st.tap_grads.get(cv.tap) {
                dy.add_assign(extra)?;
            }
            let (n, _, h, w) = input.dims4()?;
            let g = geom(cv, h, w);
            let wlen = cv.out_c * cv.in_c * cv.k * cv.k;
            let weight = &st.params[cv.weight..cv.weight + wlen];
            let dx = match st.grads.as_deref_mut() {
                Some(grads) => {
                    let (wg, bg) = split_weight_bias(grads, cv.weight, wlen, cv.bias, cv.out_c);
                    kernels::conv_backward(&g, n, input.data(), weight, dy.data(), Some(wg), bg)
                }
                None => kernels::conv_backward(&g, n, input.data(), weight, dy.data(), None, None),
            };
            Tensor::from_vec(input.shape(), dx)
        }
        (Layer::BatchNorm(bn), Cache::BatchNorm { xhat, inv_std, batch }) => {
            let (n, c, h, w) = dy.dims4()?;
            let hw = h * w;
            let m = (n * hw) as f64;
            let gamma = &st.params[bn.gamma..bn.gamma + c];
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for p in base..base + hw {
                        sum_dy[ch] += dy.data()[p];
                        sum_dy_xhat[ch] += dy.data()[p] * xhat[p];
                    }
                }
            }
            if let Some(grads) = st.grads.as_deref_mut() {
                for ch in 0..c {
                    grads[bn.gamma + ch] += sum_dy_xhat[ch];
                    grads[bn.beta + ch] += sum_dy[ch];
                }
            }
            let mut dx = vec![0.0; dy.len()];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    let k = gamma[ch] * inv_std[ch];
                    for p in base..base + hw {
                        dx[p] = if *batch {
                            k * (dy.data()[p] - sum_dy[ch] / m - xhat[p] * sum_dy_xhat[ch] / m)
                        } else {
                            k * dy.data()[p]
                        };
                    }
                }
            }
            Tensor::from_vec(dy.shape(), dx)
        }
        (Layer::Relu, Cache::Relu { output }) => {
            dy.data_mut()
                .iter_mut()
                .zip(output.data())
                .for_each(|(g, &o)| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
            Ok(dy)
        }
        (Layer::MaxPool2, Cache::MaxPool { arg, in_shape }) => {
            let len = in_shape.iter().product();
            Tensor::from_vec(in_shape, kernels::maxpool2_backward(len, arg, dy.data()))
        }
        (Layer::GlobalAvgPool, Cache::GlobalAvgPool { in_shape }) => {
            let hw = in_shape[2] * in_shape[3];
            let mut dx = Vec::with_capacity(in_shape.iter().product());
            for &g in dy.data() {
                dx.extend(std::iter::repeat_n(g / hw as f64, hw));
            }
            Tensor::from_vec(in_shape, dx)
        }
        (Layer::Flatten, Cache::Reshape { in_shape }) => dy.reshape(in_shape),
        (Layer::Linear(l), Cache::Linear { input }) => {
            let n = input.batch();
            let weight = &st.params[l.weight..l.weight + l.inp * l.out];
            let dx = match st.grads.as_deref_mut() {
                Some(grads) => {
                    let (wg, bg) =
                        split_weight_bias(grads, l.weight, l.inp * l.out, Some(l.bias), l.out);
                    kernels::linear_backward(n, l.inp, l.out, input.data(), weight, dy.data(), Some(wg), bg)
                }
                None => kernels::linear_backward(n, l.inp, l.out, input.data(), weight, dy.data(), None, None),
            };
            Tensor::from_vec(&[n, l.inp], dx)
        }
        (Layer::Residual { body, shortcut }, Cache::Residual { body: bc, shortcut: sc, output }) => {
            dy.data_mut()
                .iter_mut()
                .zip(output.data())
                .for_each(|(g, &o)| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
            let mut dx = backward_layers(body, bc, dy.clone(), st)?;
            let ds = backward_layers(shortcut, sc, dy, st)?;
            dx.add_assign(&ds)?;
            Ok(dx)
        }
        _ => Err(Error::Internal("trace does not match network layers".into())),
    }
}

/// Disjoint mutable views of a layer's weight and optional bias gradients.
fn split_weight_bias(
    grads: &mut [f64],
    weight: usize,
    wlen: usize,
    bias: Option<usize>,
    blen: usize,
) -> (&mut [f64], Option<&mut [f64]>) {
    match bias {
        Some(b) if b >= weight + wlen => {
            let (lo, hi) = grads.split_at_mut(b);
            (&mut lo[weight..weight + wlen], Some(&mut hi[..blen]))
        }
        Some(b) => {
            let (lo, hi) = grads.split_at_mut(weight);
            (&mut hi[..wlen], Some(&mut lo[b..b + blen]))
        }
        None => (&mut grads[weight..weight + wlen], None),
    }
}

fn geom(cv: &Conv, h: usize, w: usize) -> ConvGeom {
    ConvGeom {
        in_c: cv.in_c,
        out_c: cv.out_c,
        k: cv.k,
        pad: cv.pad,
        h,
        w,
    }
}

/// Per-channel mean and biased variance over `(N, H, W)`.
pub fn channel_moments(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (ch, mu) in mean.iter_mut().enumerate() {
            let base = (i * c + ch) * hw;
            *mu += x[base..base + hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            var[ch] += x[base..base + hw]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// Incrementally assembles a [`Network`], drawing initial parameters from `rng`.
pub struct NetBuilder<'r, R: Rng> {
    rng: &'r mut R,
    params: Vec<f64>,
    running: Vec<f64>,
    taps: usize,
}

impl<'r, R: Rng> NetBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        NetBuilder {
            rng,
            params: Vec::new(),
            running: Vec::new(),
            taps: 0,
        }
    }

    fn alloc_normal(&mut self, len: usize, std: f64) -> usize {
        let off = self.params.len();
        let dist = Normal::new(0.0, std).expect("finite std");
        for _ in 0..len {
            let v = dist.sample(self.rng);
            self.params.push(v);
        }
        off
    }

    fn alloc_uniform(&mut self, len: usize, bound: f64) -> usize {
        let off = self.params.len();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for _ in 0..len {
            let v = dist.sample(self.rng);
            self.params.push(v);
        }
        off
    }

    fn alloc_const(&mut self, len: usize, value: f64) -> usize {
        let off = self.params.len();
        self.params.extend(std::iter::repeat_n(value, len));
        off
    }

    /// Same-padded square convolution with He-normal weights.
    pub(crate) fn conv(&mut self, in_c: usize, out_c: usize, k: usize, bias: bool) -> Layer {
        let fan_in = (in_c * k * k) as f64;
        let weight = self.alloc_normal(out_c * in_c * k * k, (2.0 / fan_in).sqrt());
        let bias = bias.then(|| self.alloc_uniform(out_c, 1.0 / fan_in.sqrt()));
        let tap = self.taps;
        self.taps += 1;
        Layer::Conv(Conv {
            in_c,
            out_c,
            k,
            pad: k / 2,
            weight,
            bias,
            tap,
        })
    }

    pub(crate) fn batch_norm(&mut self, c: usize) -> Layer {
        let gamma = self.alloc_const(c, 1.0);
        let beta = self.alloc_const(c, 0.0);
        let stats = self.running.len();
        self.running.extend(std::iter::repeat_n(0.0, c));
        self.running.extend(std::iter::repeat_n(1.0, c));
        Layer::BatchNorm(BatchNorm {
            c,
            gamma,
            beta,
            stats,
        })
    }

    pub(crate) fn linear(&mut self, inp: usize, out: usize) -> Layer {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = self.alloc_uniform(inp * out, bound);
        let bias = self.alloc_uniform(out, bound);
        Layer::Linear(Linear {
            inp,
            out,
            weight,
            bias,
        })
    }

    pub(crate) fn finish(
        self,
        layers: Vec<Layer>,
        input_shape: [usize; 3],
        output_dim: usize,
    ) -> Result<Network> {
        let head = match find_last_linear(&layers) {
            Some(l) if l.out == output_dim => l.weight.min(l.bias)..(l.bias + l.out).max(l.weight + l.inp * l.out),
            _ => {
                return Err(Error::Internal(
                    "network must end in a linear layer of width output_dim".into(),
                ))
            }
        };
        let mut tap_norms = vec![None; self.taps];
        collect_tap_norms(&layers, &mut tap_norms);
        let net = Network {
            layers,
            input_shape,
            output_dim,
            params: self.params,
            running: self.running,
            num_taps: self.taps,
            tap_norms,
            head,
        };
        // Validate the wiring once with a dummy batch.
        let probe = Tensor::zeros(&[1, input_shape[0], input_shape[1], input_shape[2]]);
        let (out, _) = net.forward(&probe, Mode::Eval)?;
        if out.shape() != [1, output_dim] {
            return Err(Error::Internal(format!(
                "network produced {:?}, expected [1, {output_dim}]",
                out.shape()
            )));
        }
        Ok(net)
    }
}

fn find_last_linear(layers: &[Layer]) -> Option<&Linear> {
    layers.iter().rev().find_map(|l| match l {
        Layer::Linear(l) => Some(l),
        _ => None,
    })
}

fn collect_tap_norms(layers: &[Layer], out: &mut [Option<(usize, usize)>]) {
    for pair in layers.windows(2) {
        if let (Layer::Conv(cv), Layer::BatchNorm(bn)) = (&pair[0], &pair[1]) {
            out[cv.tap] = Some((bn.stats, bn.c));
        }
    }
    for l in layers {
        if let Layer::Residual { body, shortcut } = l {
            collect_tap_norms(body, out);
            collect_tap_norms(shortcut, out);
        }
    }
}
