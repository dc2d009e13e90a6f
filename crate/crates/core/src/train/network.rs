//! Batched forward/backward passes over a network description, with latent
//! (shadow) weights for binary layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bitcore::{self, RealTensor};
use crate::error::{Error, Result};
use crate::layers::{self, Activation, BatchNormParams, ConvGeometry, OutputNorm, PoolKind};
use crate::model::{BinaryStage, LayerParams, Model};
use crate::netspec::{Group, NetworkSpec, Precision, Stage};

/// One trainable tensor with its Adam moments.
#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub v: Vec<f32>,
    pub g: Vec<f32>,
    m: Vec<f32>,
    s: Vec<f32>,
}

impl Param {
    fn new(v: Vec<f32>) -> Self {
        let n = v.len();
        Self {
            v,
            g: vec![0.0; n],
            m: vec![0.0; n],
            s: vec![0.0; n],
        }
    }

    fn filled(n: usize, x: f32) -> Self {
        Self::new(vec![x; n])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam step; `t` counts from 1.
pub(crate) fn adam_step(p: &mut Param, cfg: &AdamConfig, t: i32) {
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..p.v.len() {
        let g = p.g[i];
        p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
        p.s[i] = cfg.beta2 * p.s[i] + (1.0 - cfg.beta2) * g * g;
        let mh = p.m[i] / c1;
        let sh = p.s[i] / c2;
        p.v[i] -= cfg.lr * mh / (sh.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone)]
struct Bn {
    gamma: Param,
    beta: Param,
    mean: Vec<f32>,
    var: Vec<f32>,
}

pub(crate) const BN_EPS: f32 = 1e-4;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
enum Op {
    Conv {
        geom: ConvGeometry,
        kernel: [usize; 4],
        input: [usize; 3],
        acc: [usize; 3],
    },
    Dense {
        n_in: usize,
        n_out: usize,
    },
}

#[derive(Debug, Clone)]
struct PoolMap {
    kind: PoolKind,
    /// Accumulator indices feeding each pooled output, in scan order.
    windows: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub(crate) struct PLayer {
    index: usize,
    op: Op,
    binary: bool,
    pool: Option<PoolMap>,
    channels: usize,
    w: Param,
    bias: Option<Param>,
    bn: Option<Bn>,
    activation: Activation,
    keep: f32,
    in_len: usize,
    acc_len: usize,
    out_len: usize,
}

#[derive(Default)]
struct Cache {
    x: Vec<f32>,
    xe: Vec<f32>,
    we: Vec<f32>,
    pre: Vec<f32>,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    z: Vec<f32>,
    mask: Option<Vec<f32>>,
    argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Network {
    pub spec: NetworkSpec,
    layers: Vec<PLayer>,
    pub classes: usize,
    step: i32,
}

#[inline]
fn sign(v: f32) -> f32 {
    if layers::sign_bit(v) {
        1.0
    } else {
        -1.0
    }
}

fn source(out: usize, stride: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = out * stride + k;
    (pos >= pad && pos - pad < len).then(|| pos - pad)
}

impl Network {
    pub fn new(spec: &NetworkSpec, keep_conv: f32, keep_classifier: f32, seed: u64) -> Result<Self> {
        let ins = spec.input_shapes()?;
        let outs = spec.infer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for stage in spec.stages() {
            let (i, pool) = match stage {
                Stage::Param { layer, pool } => (layer, pool),
                Stage::Flatten(_) => continue,
                Stage::Pool(p) => {
                    return Err(Error::Unsupported(format!(
                        "training a pool (layer {p}) that does not directly follow a weighted layer"
                    )))
                }
            };
            let d = &spec.layers[i];
            let input = &ins[i];
            let wshape = d.weight_shape(input)?;
            let channels = d.out_channels(input);
            let acc_shape = outs[i].0.clone();
            let op = if d.kind.is_dense() {
                Op::Dense {
                    n_in: input.iter().product(),
                    n_out: channels,
                }
            } else {
                Op::Conv {
                    geom: d.conv_geometry(),
                    kernel: [wshape[0], wshape[1], wshape[2], wshape[3]],
                    input: [input[0], input[1], input[2]],
                    acc: [acc_shape[0], acc_shape[1], acc_shape[2]],
                }
            };
            let pool_map = match pool {
                Some(p) => {
                    let pd = &spec.layers[p];
                    let [t, h, c] = [acc_shape[0], acc_shape[1], acc_shape[2]];
                    let win = pd.pool_window();
                    let [to, ho, _] = win.output_shape([t, h, c])?;
                    let mut windows = Vec::with_capacity(to * ho * c);
                    for ot in 0..to {
                        for oh in 0..ho {
                            for ch in 0..c {
                                let mut idx = Vec::with_capacity(win.count());
                                for dt in 0..win.size[0] {
                                    for dh in 0..win.size[1] {
                                        let (tt, hh) = (ot * win.stride[0] + dt, oh * win.stride[1] + dh);
                                        idx.push((tt * h + hh) * c + ch);
                                    }
                                }
                                windows.push(idx);
                            }
                        }
                    }
                    Some(PoolMap {
                        kind: pd.pool_kind().unwrap(),
                        windows,
                    })
                }
                None => None,
            };
            let n_w: usize = wshape.iter().product();
            let fan_in = n_w / wshape[0];
            let fan_out = n_w / wshape[wshape.len() - 1].max(1);
            let a = (6.0 / (fan_in + fan_out.max(1)) as f32).sqrt();
            let w: Vec<f32> = (0..n_w).map(|_| rng.random_range(-a..a)).collect();
            let out_len = match pool {
                Some(p) => outs[p].elements(),
                None => outs[i].elements(),
            };
            let keep = match spec.group_of(i) {
                Group::FeatureExtractor => keep_conv,
                Group::Classifier => keep_classifier,
            };
            layers.push(PLayer {
                index: i,
                op,
                binary: d.precision == Precision::Binary,
                pool: pool_map,
                channels,
                w: Param::new(w),
                bias: d.bias.then(|| Param::filled(channels, 0.0)),
                bn: d.batchnorm.then(|| Bn {
                    gamma: Param::filled(channels, 1.0),
                    beta: Param::filled(channels, 0.0),
                    mean: vec![0.0; channels],
                    var: vec![1.0; channels],
                }),
                activation: d.activation,
                keep,
                in_len: input.iter().product(),
                acc_len: outs[i].elements(),
                out_len,
            });
        }
        let last = layers
            .last()
            .ok_or_else(|| Error::Config("network has no trainable layers".into()))?;
        if !matches!(last.op, Op::Dense { .. }) {
            return Err(Error::Config("network must end in a dense/softmax layer".into()));
        }
        let classes = last.channels;
        Ok(Self {
            spec: spec.clone(),
            layers,
            classes,
            step: 0,
        })
    }

    /// Training-mode forward (batch statistics, dropout). Returns logits.
    fn forward(&mut self, x: &[f32], b: usize, rng: &mut ChaCha8Rng, caches: &mut Vec<Cache>) -> Vec<f32> {
        caches.clear();
        let mut cur = x.to_vec();
        let n_layers = self.layers.len();
        for (li, l) in self.layers.iter_mut().enumerate() {
            let mut c = Cache::default();
            let xe: Vec<f32> = if l.binary { cur.iter().map(|&v| sign(v)).collect() } else { cur.clone() };
            let we: Vec<f32> = if l.binary { l.w.v.iter().map(|&v| sign(v)).collect() } else { l.w.v.clone() };
            let acc: Vec<f32> = (0..b)
                .into_par_iter()
                .flat_map_iter(|s| {
                    let xs = &xe[s * l.in_len..(s + 1) * l.in_len];
                    match &l.op {
                        Op::Dense { n_out, .. } => layers::dense_accumulate_real(xs, &we, *n_out).unwrap(),
                        Op::Conv { geom, kernel, input, .. } => layers::conv_real(xs, *input, &we, *kernel, geom).unwrap().0,
                    }
                })
                .collect();
            let pre = match &l.pool {
                None => acc,
                Some(pm) => {
                    let mut out = Vec::with_capacity(b * l.out_len);
                    c.argmax = Vec::new();
                    for s in 0..b {
                        let a = &acc[s * l.acc_len..(s + 1) * l.acc_len];
                        for win in &pm.windows {
                            match pm.kind {
                                PoolKind::Avg => {
                                    let mut sum = a[win[0]];
                                    for &k in &win[1..] {
                                        sum += a[k];
                                    }
                                    out.push(sum / win.len() as f32);
                                }
                                PoolKind::Max => {
                                    let mut best = win[0];
                                    for &k in &win[1..] {
                                        if a[k] > a[best] {
                                            best = k;
                                        }
                                    }
                                    c.argmax.push(best);
                                    out.push(a[best]);
                                }
                            }
                        }
                    }
                    out
                }
            };
            let ch = l.channels;
            let mut z = pre.clone();
            if let Some(bias) = &l.bias {
                for (k, v) in z.iter_mut().enumerate() {
                    *v += bias.v[k % ch];
                }
            }
            if let Some(bn) = &mut l.bn {
                let count = (z.len() / ch) as f32;
                let mut mean = vec![0f32; ch];
                let mut var = vec![0f32; ch];
                for (k, &v) in z.iter().enumerate() {
                    mean[k % ch] += v;
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for (k, &v) in z.iter().enumerate() {
                    let d = v - mean[k % ch];
                    var[k % ch] += d * d;
                }
                var.iter_mut().for_each(|v| *v /= count);
                c.inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                c.xhat = z.iter().enumerate().map(|(k, &v)| (v - mean[k % ch]) * c.inv_std[k % ch]).collect();
                for (k, v) in z.iter_mut().enumerate() {
                    *v = bn.gamma.v[k % ch] * c.xhat[k] + bn.beta.v[k % ch];
                }
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for j in 0..ch {
                    bn.mean[j] = (1.0 - BN_MOMENTUM) * bn.mean[j] + BN_MOMENTUM * mean[j];
                    bn.var[j] = (1.0 - BN_MOMENTUM) * bn.var[j] + BN_MOMENTUM * var[j] * unbias;
                }
            }
            let mut out: Vec<f32> = z
                .iter()
                .map(|&v| match l.activation {
                    Activation::Relu => layers::relu(v),
                    Activation::Hardtanh => layers::hardtanh(v),
                    Activation::Sign => sign(v),
                    Activation::None => v,
                })
                .collect();
            if l.keep < 1.0 && l.activation != Activation::Sign && li + 1 < n_layers {
                let mask: Vec<f32> = (0..out.len())
                    .map(|_| if rng.random::<f32>() < l.keep { 1.0 / l.keep } else { 0.0 })
                    .collect();
                out.iter_mut().zip(&mask).for_each(|(o, m)| *o *= m);
                c.mask = Some(mask);
            }
            c.x = cur;
            c.xe = xe;
            c.we = we;
            c.pre = pre;
            c.z = z;
            caches.push(c);
            cur = out;
        }
        cur
    }

    /// Accumulate gradients of the batch loss into every parameter.
    fn backward(&mut self, caches: &[Cache], dlogits: Vec<f32>, b: usize) {
        let mut grad = dlogits;
        for (li, l) in self.layers.iter_mut().enumerate().rev() {
            let c = &caches[li];
            let ch = l.channels;
            if let Some(mask) = &c.mask {
                grad.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
            }
            for (g, &z) in grad.iter_mut().zip(&c.z) {
                *g *= match l.activation {
                    Activation::Relu => (z > 0.0) as u8 as f32,
                    Activation::Hardtanh | Activation::Sign => (z.abs() <= 1.0) as u8 as f32,
                    Activation::None => 1.0,
                };
            }
            if let Some(bn) = &mut l.bn {
                let count = (grad.len() / ch) as f32;
                let mut sum_g = vec![0f32; ch];
                let mut sum_gx = vec![0f32; ch];
                for (k, &g) in grad.iter().enumerate() {
                    sum_g[k % ch] += g;
                    sum_gx[k % ch] += g * c.xhat[k];
                }
                for j in 0..ch {
                    bn.gamma.g[j] += sum_gx[j];
                    bn.beta.g[j] += sum_g[j];
                }
                for (k, g) in grad.iter_mut().enumerate() {
                    let j = k % ch;
                    *g = bn.gamma.v[j] * c.inv_std[j] * (*g - sum_g[j] / count - c.xhat[k] * sum_gx[j] / count);
                }
            }
            if let Some(bias) = &mut l.bias {
                for (k, &g) in grad.iter().enumerate() {
                    bias.g[k % ch] += g;
                }
            }
            let dacc = match &l.pool {
                None => grad,
                Some(pm) => {
                    let mut d = vec![0f32; b * l.acc_len];
                    let per = pm.windows.len();
                    for s in 0..b {
                        let ds = &mut d[s * l.acc_len..(s + 1) * l.acc_len];
                        for (o, win) in pm.windows.iter().enumerate() {
                            let g = grad[s * per + o];
                            match pm.kind {
                                PoolKind::Avg => {
                                    let share = g / win.len() as f32;
                                    for &k in win {
                                        ds[k] += share;
                                    }
                                }
                                PoolKind::Max => ds[c.argmax[s * per + o]] += g,
                            }
                        }
                    }
                    d
                }
            };
            let need_dx = li > 0;
            let (dw, dxe) = op_backward(&l.op, &c.xe, &c.we, &dacc, b, l.in_len, l.acc_len, need_dx);
            for (i, g) in dw.into_iter().enumerate() {
                if !l.binary || l.w.v[i].abs() <= 1.0 {
                    l.w.g[i] += g;
                }
            }
            grad = if l.binary {
                dxe.iter().zip(&c.x).map(|(&g, &x)| if x.abs() <= 1.0 { g } else { 0.0 }).collect()
            } else {
                dxe
            };
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = (&mut Param, bool)> {
        self.layers.iter_mut().flat_map(|l| {
            let binary = l.binary;
            let mut v: Vec<(&mut Param, bool)> = vec![(&mut l.w, binary)];
            if let Some(b) = &mut l.bias {
                v.push((b, false));
            }
            if let Some(bn) = &mut l.bn {
                v.push((&mut bn.gamma, false));
                v.push((&mut bn.beta, false));
            }
            v
        })
    }

    /// One optimisation step on a batch; returns (mean loss, correct count).
    pub fn train_batch(&mut self, x: &[f32], labels: &[usize], adam: &AdamConfig, rng: &mut ChaCha8Rng) -> Result<(f32, usize)> {
        let b = labels.len();
        let mut caches = Vec::new();
        let logits = self.forward(x, b, rng, &mut caches);
        let (loss, dlogits, correct) = softmax_ce(&logits, labels, self.classes);
        if !loss.is_finite() {
            return Ok((loss, correct));
        }
        for (p, _) in self.params_mut() {
            p.g.iter_mut().for_each(|g| *g = 0.0);
        }
        self.backward(&caches, dlogits, b);
        self.step += 1;
        let t = self.step;
        for (p, binary) in self.params_mut() {
            adam_step(p, adam, t);
            if binary {
                p.v.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            }
        }
        Ok((loss, correct))
    }

    /// Inference model with unfolded output stages (running statistics).
    pub fn export(&self) -> Result<Model> {
        let ins = self.spec.input_shapes()?;
        let mut params: Vec<LayerParams> = self.spec.layers.iter().map(|_| LayerParams::None).collect();
        for l in &self.layers {
            let shape = self.spec.layers[l.index].weight_shape(&ins[l.index])?;
            let norm = match (&l.bn, &l.bias) {
                (Some(bn), _) => OutputNorm::BatchNorm(BatchNormParams {
                    mean: bn.mean.clone(),
                    variance: bn.var.clone(),
                    scale: bn.gamma.v.clone(),
                    shift: bn.beta.v.clone(),
                    epsilon: BN_EPS,
                }),
                (None, Some(b)) => OutputNorm::Bias(b.v.clone()),
                (None, None) => OutputNorm::None,
            };
            params[l.index] = if l.binary {
                LayerParams::Binary {
                    weights: bitcore::pack_slice(shape, &l.w.v)?,
                    stage: BinaryStage::Norm(norm),
                }
            } else {
                LayerParams::Real {
                    weights: RealTensor::new(shape, l.w.v.clone())?,
                    norm,
                }
            };
        }
        Model::new(self.spec.clone(), params)
    }
}

#[allow(clippy::too_many_arguments)]
fn op_backward(
    op: &Op,
    xe: &[f32],
    we: &[f32],
    dacc: &[f32],
    b: usize,
    in_len: usize,
    acc_len: usize,
    need_dx: bool,
) -> (Vec<f32>, Vec<f32>) {
    match *op {
        Op::Dense { n_in, n_out } => {
            let dw: Vec<f32> = (0..n_out)
                .into_par_iter()
                .flat_map_iter(|k| {
                    let mut row = vec![0f32; n_in];
                    for s in 0..b {
                        let g = dacc[s * n_out + k];
                        if g != 0.0 {
                            let xs = &xe[s * n_in..(s + 1) * n_in];
                            row.iter_mut().zip(xs).for_each(|(r, &x)| *r += g * x);
                        }
                    }
                    row
                })
                .collect();
            let dx = if need_dx {
                (0..b)
                    .into_par_iter()
                    .flat_map_iter(|s| {
                        let mut d = vec![0f32; n_in];
                        for k in 0..n_out {
                            let g = dacc[s * n_out + k];
                            if g != 0.0 {
                                d.iter_mut().zip(&we[k * n_in..(k + 1) * n_in]).for_each(|(d, &w)| *d += g * w);
                            }
                        }
                        d
                    })
                    .collect()
            } else {
                Vec::new()
            };
            (dw, dx)
        }
        Op::Conv { geom, kernel, input, acc } => {
            let [f, kt, kh, kc] = kernel;
            let [t, h, c] = input;
            let [to, ho, _] = acc;
            let per_f = kt * kh * kc;
            let dw: Vec<f32> = (0..f)
                .into_par_iter()
                .flat_map_iter(|fi| {
                    let mut d = vec![0f32; per_f];
                    for s in 0..b {
                        let xs = &xe[s * in_len..(s + 1) * in_len];
                        let gs = &dacc[s * acc_len..(s + 1) * acc_len];
                        for ot in 0..to {
                            for oh in 0..ho {
                                let g = gs[(ot * ho + oh) * f + fi];
                                if g == 0.0 {
                                    continue;
                                }
                                for dt in 0..kt {
                                    let Some(it) = source(ot, geom.stride[0], dt, geom.padding[0], t) else { continue };
                                    for dh in 0..kh {
                                        let Some(ih) = source(oh, geom.stride[1], dh, geom.padding[1], h) else { continue };
                                        let wk = (dt * kh + dh) * kc;
                                        if geom.depthwise {
                                            d[wk] += g * xs[(it * h + ih) * c + fi];
                                        } else {
                                            let xrow = &xs[(it * h + ih) * c..][..c];
                                            d[wk..wk + c].iter_mut().zip(xrow).for_each(|(d, &x)| *d += g * x);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    d
                })
                .collect();
            let dx = if need_dx {
                (0..b)
                    .into_par_iter()
                    .flat_map_iter(|s| {
                        let gs = &dacc[s * acc_len..(s + 1) * acc_len];
                        let mut d = vec![0f32; in_len];
                        for ot in 0..to {
                            for oh in 0..ho {
                                for fi in 0..f {
                                    let g = gs[(ot * ho + oh) * f + fi];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for dt in 0..kt {
                                        let Some(it) = source(ot, geom.stride[0], dt, geom.padding[0], t) else { continue };
                                        for dh in 0..kh {
                                            let Some(ih) = source(oh, geom.stride[1], dh, geom.padding[1], h) else { continue };
                                            let wk = (fi * kt + dt) * kh + dh;
                                            if geom.depthwise {
                                                d[(it * h + ih) * c + fi] += g * we[wk];
                                            } else {
                                                let base = (it * h + ih) * c;
                                                d[base..base + c]
                                                    .iter_mut()
                                                    .zip(&we[wk * c..(wk + 1) * c])
                                                    .for_each(|(d, &w)| *d += g * w);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        d
                    })
                    .collect()
            } else {
                Vec::new()
            };
            (dw, dx)
        }
    }
}

/// Mean softmax cross-entropy, its gradient w.r.t. the logits, and the
/// number of correct argmax predictions.
pub(crate) fn softmax_ce(logits: &[f32], labels: &[usize], classes: usize) -> (f32, Vec<f32>, usize) {
    let b = labels.len();
    let mut grad = vec![0f32; logits.len()];
    let mut loss = 0f64;
    let mut correct = 0;
    for (s, &y) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f32 = exps.iter().sum();
        loss -= ((exps[y] / sum) as f64).ln();
        if crate::model::argmax(row) == y {
            correct += 1;
        }
        for k in 0..classes {
            grad[s * classes + k] = (exps[k] / sum - (k == y) as u8 as f32) / b as f32;
        }
    }
    ((loss / b as f64) as f32, grad, correct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::LayerDescriptor as L;

    fn single_binary_dense() -> Network {
        let spec = NetworkSpec::new(
            "g",
            vec![6, 1, 1],
            vec![L::flatten(), L::dense(3).with_precision(Precision::Binary)],
        );
        Network::new(&spec, 1.0, 1.0, 5).unwrap()
    }

    #[test]
    fn ste_gradient_matches_clipped_identity_surrogate() {
        let mut net = single_binary_dense();
        // Put some shadows outside the pass-through band.
        net.layers[0].w.v[0] = 1.0;
        net.layers[0].w.v[4] = -1.0;
        net.layers[0].w.v[7] = 1.3;
        net.layers[0].w.v[11] = -1.2;
        let x = [0.5f32, -0.2, 0.9, -0.7, 0.1, 0.3];
        let coef = [0.7f32, -1.1, 0.4];
        let mut caches = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        net.forward(&x, 1, &mut rng, &mut caches);
        net.backward(&caches, coef.to_vec(), 1);
        let xe: Vec<f32> = x.iter().map(|&v| sign(v)).collect();
        // Surrogate loss: Σ_k coef_k Σ_j clip(w_kj) · sign(x_j)
        let surrogate = |w: &[f32]| -> f64 {
            (0..3)
                .map(|k| {
                    coef[k] as f64
                        * (0..6).map(|j| (w[k * 6 + j].clamp(-1.0, 1.0) * xe[j]) as f64).sum::<f64>()
                })
                .sum()
        };
        let w0 = net.layers[0].w.v.clone();
        let h = 1e-3f32;
        for i in 0..w0.len() {
            if (w0[i].abs() - 1.0).abs() < 2.0 * h {
                // Kink of the surrogate: the STE uses the inside derivative.
                let expect = coef[i / 6] * xe[i % 6];
                assert!((net.layers[0].w.g[i] - expect).abs() < 1e-6);
                continue;
            }
            let mut plus = w0.clone();
            plus[i] += h;
            let mut minus = w0.clone();
            minus[i] -= h;
            let fd = ((surrogate(&plus) - surrogate(&minus)) / (2.0 * h as f64)) as f32;
            let g = net.layers[0].w.g[i];
            let denom = fd.abs().max(1e-6);
            assert!((g - fd).abs() / denom < 1e-4 || (g - fd).abs() < 1e-6, "w{i}: {g} vs {fd}");
        }
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut p = Param::new(vec![0.3, -0.2]);
        for t in 1..5 {
            adam_step(&mut p, &AdamConfig::default(), t);
        }
        assert_eq!(p.v, vec![0.3, -0.2]);
    }

    #[test]
    fn real_gradients_match_finite_differences() {
        use crate::layers::Activation::*;
        let spec = NetworkSpec::new(
            "fd",
            vec![12, 1, 2],
            vec![
                L::conv_temporal(3, 3, 1).with_bias().with_activation(Hardtanh),
                L::avg_pool([2, 1], [2, 1]),
                L::conv_temporal(2, 2, 0).with_batchnorm().with_activation(Relu),
                L::max_pool(2),
                L::flatten(),
                L::softmax(2),
            ],
        );
        let mut net = Network::new(&spec, 1.0, 1.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = 4;
        let x: Vec<f32> = (0..b * 24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = [0, 1, 1, 0];
        let loss_of = |net: &mut Network| -> f64 {
            let mut c = Vec::new();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let logits = net.forward(&x, b, &mut r, &mut c);
            softmax_ce(&logits, &labels, 2).0 as f64
        };
        let mut c = Vec::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let logits = net.forward(&x, b, &mut r, &mut c);
        let (_, d, _) = softmax_ce(&logits, &labels, 2);
        for (p, _) in net.params_mut() {
            p.g.iter_mut().for_each(|g| *g = 0.0);
        }
        net.backward(&c, d, b);
        let analytic = net.layers[0].w.g.clone();
        let h = 1e-2f32;
        let mut checked = 0;
        for i in 0..analytic.len() {
            let orig = net.layers[0].w.v[i];
            net.layers[0].w.v[i] = orig + h;
            let lp = loss_of(&mut net.clone());
            net.layers[0].w.v[i] = orig - h;
            let lm = loss_of(&mut net.clone());
            net.layers[0].w.v[i] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            if (analytic[i] as f64 - fd).abs() < 2e-3 + 0.05 * fd.abs() {
                checked += 1;
            }
        }
        // Kinks of hardtanh/relu/max can break a few central differences.
        assert!(checked as f64 >= 0.8 * analytic.len() as f64, "{checked}/{}", analytic.len());
    }
}
