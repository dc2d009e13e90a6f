//! Real and binarized layer kernels: dense, convolution, pooling, activations
//! and batch-norm folding.
//!
//! Feature maps are row-major `[time, height, channels]`. Convolution kernels
//! are `[filters, kernel_t, kernel_h, in_channels]` (depthwise kernels use
//! `in_channels = 1` and one filter per input channel). Convolution is
//! cross-correlation; any flip convention lives in the stored kernel order.
//!
//! Binary kernels skip padded positions entirely, so padding never biases the
//! ±1 dot product. The float emulation pads with zeros, which contributes the
//! same nothing.

use serde::{Deserialize, Serialize};

use crate::bitcore::{self, dot_span, BitTensor, RealTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Hardtanh,
    Sign,
    None,
}

/// Decision of the sign activation; `sign(0) = +1`.
#[inline]
pub fn sign_bit(z: f32) -> bool {
    z >= 0.0
}

/// Either a real or a packed binary feature map.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Real(RealTensor),
    Bits(BitTensor),
}

impl FeatureMap {
    pub fn shape(&self) -> &[usize] {
        match self {
            FeatureMap::Real(t) => t.shape(),
            FeatureMap::Bits(b) => b.shape(),
        }
    }

    /// Real view; bits unpack to ±1.
    pub fn to_real(&self) -> RealTensor {
        match self {
            FeatureMap::Real(t) => t.clone(),
            FeatureMap::Bits(b) => bitcore::unpack(b),
        }
    }

    /// Binary view; reals binarize by sign.
    pub fn to_bits(&self) -> Result<BitTensor> {
        match self {
            FeatureMap::Real(t) => bitcore::pack(t),
            FeatureMap::Bits(b) => Ok(b.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Real(RealTensor),
    Binary(BitTensor),
}

impl LayerWeights {
    pub fn shape(&self) -> &[usize] {
        match self {
            LayerWeights::Real(t) => t.shape(),
            LayerWeights::Binary(b) => b.shape(),
        }
    }
}

/// Which side of a binary threshold fires +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    AtLeast,
    AtMost,
}

/// Folded comparison replacing bias/BN followed by `sign`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryThreshold {
    pub value: i32,
    pub direction: Direction,
}

impl BinaryThreshold {
    pub fn at_least(value: i32) -> Self {
        Self {
            value,
            direction: Direction::AtLeast,
        }
    }

    #[inline]
    pub fn fires(&self, a: i32) -> bool {
        match self.direction {
            Direction::AtLeast => a >= self.value,
            Direction::AtMost => a <= self.value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Thresholds {
    /// Per-output bias added to the real accumulation.
    Real(Vec<f32>),
    Binary(Vec<BinaryThreshold>),
}

impl Thresholds {
    pub fn len(&self) -> usize {
        match self {
            Thresholds::Real(v) => v.len(),
            Thresholds::Binary(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: LayerWeights,
    pub thresholds: Thresholds,
}

impl DenseLayer {
    pub fn new(weights: LayerWeights, thresholds: Thresholds) -> Result<Self> {
        let shape = weights.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "dense weights must be [out, in], got {shape:?}"
            )));
        }
        let (out, fan_in) = (shape[0], shape[1]);
        if thresholds.len() != out {
            return Err(Error::shape(format!(
                "{} thresholds for {out} outputs",
                thresholds.len()
            )));
        }
        if let Thresholds::Binary(th) = &thresholds {
            let n = fan_in as i64;
            if th
                .iter()
                .any(|t| (t.value as i64) < -n - 1 || (t.value as i64) > n + 1)
            {
                return Err(Error::InvalidValue(format!(
                    "binary thresholds must lie in [-{}, {}]",
                    n + 1,
                    n + 1
                )));
            }
        }
        Ok(Self {
            weights,
            thresholds,
        })
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub depthwise: bool,
}

impl ConvGeometry {
    /// Stride 1, symmetric temporal padding only.
    pub fn temporal(padding: usize) -> Self {
        Self {
            stride: [1, 1],
            padding: [padding, 0],
            depthwise: false,
        }
    }
}

/// How a 1-D convolution treats the height axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Kernel height 1: every row (electrode) is convolved independently in time.
    TemporalPerChannel,
    /// Kernel spans the whole height and contracts it.
    AcrossChannels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: LayerWeights,
    pub geometry: ConvGeometry,
    pub thresholds: Thresholds,
}

impl ConvLayer {
    pub fn new(kernels: LayerWeights, geometry: ConvGeometry, thresholds: Thresholds) -> Result<Self> {
        let shape = kernels.shape();
        if shape.len() != 4 || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "conv kernels must be non-empty [filters, kt, kh, cin], got {shape:?}"
            )));
        }
        if thresholds.len() != shape[0] {
            return Err(Error::shape(format!(
                "{} thresholds for {} filters",
                thresholds.len(),
                shape[0]
            )));
        }
        if geometry.stride.contains(&0) {
            return Err(Error::shape("conv stride must be positive"));
        }
        Ok(Self {
            kernels,
            geometry,
            thresholds,
        })
    }

    fn kernel_shape(&self) -> [usize; 4] {
        let s = self.kernels.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

/// Per-channel batch-norm statistics and affine parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.mean.len();
        if self.variance.len() != c || self.scale.len() != c || self.shift.len() != c {
            return Err(Error::shape("batch-norm parameter lengths differ"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidValue("batch-norm epsilon must be > 0".into()));
        }
        if self.variance.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidValue("batch-norm variance must be >= 0".into()));
        }
        Ok(())
    }

    /// Inference-mode normalization of one value on channel `ch`.
    #[inline]
    pub fn apply(&self, ch: usize, x: f32) -> f32 {
        (x - self.mean[ch]) / (self.variance[ch] + self.epsilon).sqrt() * self.scale[ch]
            + self.shift[ch]
    }
}

/// Post-accumulation affine stage of a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputNorm {
    None,
    Bias(Vec<f32>),
    BatchNorm(BatchNormParams),
}

impl OutputNorm {
    #[inline]
    pub fn apply(&self, ch: usize, x: f32) -> f32 {
        match self {
            OutputNorm::None => x,
            OutputNorm::Bias(b) => x + b[ch],
            OutputNorm::BatchNorm(bn) => bn.apply(ch, x),
        }
    }

    pub fn channels(&self) -> Option<usize> {
        match self {
            OutputNorm::None => None,
            OutputNorm::Bias(b) => Some(b.len()),
            OutputNorm::BatchNorm(bn) => Some(bn.channels()),
        }
    }

    /// Apply in place to a channels-last buffer.
    pub fn apply_all(&self, data: &mut [f32], channels: usize) {
        if matches!(self, OutputNorm::None) {
            return;
        }
        for (i, v) in data.iter_mut().enumerate() {
            *v = self.apply(i % channels, *v);
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution

pub fn conv_output_shape(input: [usize; 3], kernel: [usize; 4], geom: &ConvGeometry) -> Result<[usize; 3]> {
    let [t, h, c] = input;
    let [f, kt, kh, kc] = kernel;
    if geom.depthwise {
        if kc != 1 || f != c {
            return Err(Error::shape(format!(
                "depthwise kernel {kernel:?} does not match {c} input channels"
            )));
        }
    } else if kc != c {
        return Err(Error::shape(format!(
            "kernel expects {kc} input channels, input has {c}"
        )));
    }
    let pt = t + 2 * geom.padding[0];
    let ph = h + 2 * geom.padding[1];
    if kt > pt || kh > ph {
        return Err(Error::shape(format!(
            "kernel {kt}x{kh} longer than padded input {pt}x{ph}"
        )));
    }
    Ok([
        (pt - kt) / geom.stride[0] + 1,
        (ph - kh) / geom.stride[1] + 1,
        f,
    ])
}

#[inline]
fn source_index(out: usize, stride: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = out * stride + k;
    if pos < pad || pos - pad >= len {
        None
    } else {
        Some(pos - pad)
    }
}

/// Real convolution accumulation (no bias). Padded positions contribute zero.
pub fn conv_real(
    x: &[f32],
    input: [usize; 3],
    w: &[f32],
    kernel: [usize; 4],
    geom: &ConvGeometry,
) -> Result<(Vec<f32>, [usize; 3])> {
    let out_shape = conv_output_shape(input, kernel, geom)?;
    let [t, h, c] = input;
    let [f, kt, kh, kc] = kernel;
    if x.len() != t * h * c || w.len() != f * kt * kh * kc {
        return Err(Error::shape("conv buffer lengths do not match shapes"));
    }
    let [to, ho, _] = out_shape;
    let mut out = vec![0.0f32; to * ho * f];
    for ot in 0..to {
        for oh in 0..ho {
            let base = (ot * ho + oh) * f;
            for fi in 0..f {
                let mut acc = 0.0f32;
                for dt in 0..kt {
                    let Some(it) = source_index(ot, geom.stride[0], dt, geom.padding[0], t) else {
                        continue;
                    };
                    for dh in 0..kh {
                        let Some(ih) = source_index(oh, geom.stride[1], dh, geom.padding[1], h) else {
                            continue;
                        };
                        let wk = (fi * kt + dt) * kh + dh;
                        if geom.depthwise {
                            acc += w[wk] * x[(it * h + ih) * c + fi];
                        } else {
                            let xs = &x[(it * h + ih) * c..][..c];
                            let ws = &w[wk * c..][..c];
                            for (a, b) in xs.iter().zip(ws) {
                                acc += a * b;
                            }
                        }
                    }
                }
                out[base + fi] = acc;
            }
        }
    }
    Ok((out, out_shape))
}

/// Binary convolution accumulation via XNOR-popcount. Returns the exact ±1
/// dot product over valid (unpadded) positions.
pub fn conv_binary(x: &BitTensor, input: [usize; 3], w: &BitTensor, kernel: [usize; 4], geom: &ConvGeometry) -> Result<(Vec<i32>, [usize; 3])> {
    if geom.depthwise {
        return Err(Error::Unsupported("binary depthwise convolution".into()));
    }
    let out_shape = conv_output_shape(input, kernel, geom)?;
    let [t, h, c] = input;
    let [f, kt, kh, _] = kernel;
    if x.len() != t * h * c || w.len() != f * kt * kh * c {
        return Err(Error::shape("conv bit lengths do not match shapes"));
    }
    let [to, ho, _] = out_shape;
    let (xw, ww) = (x.words(), w.words());
    let mut out = vec![0i32; to * ho * f];
    for ot in 0..to {
        for oh in 0..ho {
            let base = (ot * ho + oh) * f;
            // Rows oh*sh .. oh*sh+kh are contiguous in both operands when there is
            // no height padding.
            let h_start = oh * geom.stride[1];
            let contiguous = geom.padding[1] == 0;
            for fi in 0..f {
                let mut acc = 0i32;
                for dt in 0..kt {
                    let Some(it) = source_index(ot, geom.stride[0], dt, geom.padding[0], t) else {
                        continue;
                    };
                    if contiguous {
                        acc += dot_span(xw, (it * h + h_start) * c, ww, (fi * kt + dt) * kh * c, kh * c);
                        continue;
                    }
                    for dh in 0..kh {
                        let Some(ih) = source_index(oh, geom.stride[1], dh, geom.padding[1], h) else {
                            continue;
                        };
                        acc += dot_span(xw, (it * h + ih) * c, ww, ((fi * kt + dt) * kh + dh) * c, c);
                    }
                }
                out[base + fi] = acc;
            }
        }
    }
    Ok((out, out_shape))
}

fn as3(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [t, h, c] => Ok([t, h, c]),
        [t, c] => Ok([t, 1, c]),
        _ => Err(Error::shape(format!(
            "expected a [time, height, channels] map, got {shape:?}"
        ))),
    }
}

/// 1-D convolution over time. Real layers add their bias and return the
/// pre-activation map; binary layers threshold the XNOR-popcount
/// accumulation and return bits.
pub fn conv1d(x: &FeatureMap, layer: &ConvLayer, mode: ConvMode) -> Result<FeatureMap> {
    let input = as3(x.shape())?;
    let kernel = layer.kernel_shape();
    match mode {
        ConvMode::TemporalPerChannel if kernel[2] != 1 => {
            return Err(Error::shape("temporal convolution needs kernel height 1"));
        }
        ConvMode::AcrossChannels if kernel[2] != input[1] => {
            return Err(Error::shape(format!(
                "cross-channel kernel height {} must equal input height {}",
                kernel[2], input[1]
            )));
        }
        _ => {}
    }
    match (&layer.kernels, &layer.thresholds) {
        (LayerWeights::Real(w), Thresholds::Real(bias)) => {
            let xr = x.to_real();
            let (mut acc, shape) = conv_real(xr.data(), input, w.data(), kernel, &layer.geometry)?;
            OutputNorm::Bias(bias.clone()).apply_all(&mut acc, kernel[0]);
            Ok(FeatureMap::Real(RealTensor::new(shape.to_vec(), acc)?))
        }
        (LayerWeights::Binary(w), Thresholds::Binary(th)) => {
            let xb = match x {
                FeatureMap::Bits(b) => b.clone(),
                FeatureMap::Real(_) => return Err(Error::shape("binary convolution needs a packed input")),
            };
            let (acc, shape) = conv_binary(&xb, input, w, kernel, &layer.geometry)?;
            let bits: Vec<bool> = acc
                .iter()
                .enumerate()
                .map(|(i, &a)| th[i % kernel[0]].fires(a))
                .collect();
            Ok(FeatureMap::Bits(BitTensor::from_bools(shape.to_vec(), &bits)?))
        }
        (LayerWeights::Real(_), Thresholds::Binary(_)) => Err(Error::InvalidValue(
            "real kernels paired with binary thresholds".into(),
        )),
        (LayerWeights::Binary(_), Thresholds::Real(_)) => Err(Error::InvalidValue(
            "binary kernels paired with real thresholds".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Dense

pub fn dense_accumulate_real(x: &[f32], w: &[f32], outputs: usize) -> Result<Vec<f32>> {
    let n = x.len();
    if w.len() != outputs * n {
        return Err(Error::shape(format!(
            "dense weights hold {} values, expected {outputs}x{n}",
            w.len()
        )));
    }
    Ok(w
        .chunks_exact(n.max(1))
        .take(outputs)
        .map(|row| {
            let mut acc = 0.0f32;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            acc
        })
        .collect())
}

pub fn dense_accumulate_binary(x: &BitTensor, w: &BitTensor, outputs: usize) -> Result<Vec<i32>> {
    let n = x.len();
    if w.len() != outputs * n {
        return Err(Error::shape(format!(
            "dense weights hold {} bits, expected {outputs}x{n}",
            w.len()
        )));
    }
    Ok((0..outputs)
        .map(|k| dot_span(w.words(), k * n, x.words(), 0, n))
        .collect())
}

/// `out_k = Σ_j w_kj x_j + b_k`.
pub fn dense_real(x: &RealTensor, layer: &DenseLayer) -> Result<RealTensor> {
    let (LayerWeights::Real(w), Thresholds::Real(b)) = (&layer.weights, &layer.thresholds) else {
        return Err(Error::InvalidValue("dense_real needs real weights and bias".into()));
    };
    if x.len() != layer.inputs() {
        return Err(Error::shape(format!(
            "input length {} != layer fan-in {}",
            x.len(),
            layer.inputs()
        )));
    }
    let mut out = dense_accumulate_real(x.data(), w.data(), layer.outputs())?;
    for (o, bias) in out.iter_mut().zip(b) {
        *o += bias;
    }
    RealTensor::from_vec(out)
}

/// `out_k = +1` iff the ±1 dot product of row `k` with `x` passes threshold `k`.
pub fn dense_binary(x: &BitTensor, layer: &DenseLayer) -> Result<BitTensor> {
    let w = match &layer.weights {
        LayerWeights::Binary(w) => w,
        LayerWeights::Real(_) => return Err(Error::RealWeightsInBinaryPath),
    };
    let Thresholds::Binary(th) = &layer.thresholds else {
        return Err(Error::InvalidValue("binary layer needs integer thresholds".into()));
    };
    if x.len() != layer.inputs() {
        return Err(Error::shape(format!(
            "input length {} != layer fan-in {}",
            x.len(),
            layer.inputs()
        )));
    }
    let acc = dense_accumulate_binary(x, w, layer.outputs())?;
    let bits: Vec<bool> = acc.iter().zip(th).map(|(&a, t)| t.fires(a)).collect();
    BitTensor::from_bools(vec![bits.len()], &bits)
}

// ---------------------------------------------------------------------------
// Pooling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolWindow {
    pub size: [usize; 2],
    pub stride: [usize; 2],
}

impl PoolWindow {
    /// Non-overlapping temporal window.
    pub fn temporal(window: usize) -> Self {
        Self {
            size: [window, 1],
            stride: [window, 1],
        }
    }

    pub fn count(&self) -> usize {
        self.size[0] * self.size[1]
    }

    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [t, h, c] = input;
        let [wt, wh] = self.size;
        if wt == 0 || wh == 0 || self.stride.contains(&0) {
            return Err(Error::shape("pool window and stride must be positive"));
        }
        if wt > t || wh > h {
            return Err(Error::shape(format!(
                "pool window {wt}x{wh} larger than input {t}x{h}"
            )));
        }
        Ok([
            (t - wt) / self.stride[0] + 1,
            (h - wh) / self.stride[1] + 1,
            c,
        ])
    }
}

/// How pooled integer accumulations map back to the value the output stage sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolReduce {
    None,
    /// Window sum divided by this count.
    Mean(usize),
    Max,
}

impl PoolReduce {
    #[inline]
    pub fn value(&self, s: i64) -> f32 {
        match self {
            PoolReduce::Mean(n) => s as f32 / *n as f32,
            _ => s as f32,
        }
    }

    fn span(&self) -> i64 {
        match self {
            PoolReduce::Mean(n) => *n as i64,
            _ => 1,
        }
    }
}

fn pool_generic<T: Copy>(
    x: &[T],
    input: [usize; 3],
    win: &PoolWindow,
    init: impl Fn(T) -> T,
    fold: impl Fn(T, T) -> T,
    finish: impl Fn(T) -> T,
) -> Result<(Vec<T>, [usize; 3])> {
    let out_shape = win.output_shape(input)?;
    let [_, h, c] = input;
    let [to, ho, _] = out_shape;
    let mut out = Vec::with_capacity(to * ho * c);
    for ot in 0..to {
        for oh in 0..ho {
            for ch in 0..c {
                let t0 = ot * win.stride[0];
                let h0 = oh * win.stride[1];
                let mut acc = init(x[(t0 * h + h0) * c + ch]);
                for dt in 0..win.size[0] {
                    for dh in 0..win.size[1] {
                        if dt == 0 && dh == 0 {
                            continue;
                        }
                        acc = fold(acc, x[((t0 + dt) * h + h0 + dh) * c + ch]);
                    }
                }
                out.push(finish(acc));
            }
        }
    }
    Ok((out, out_shape))
}

/// Real pooling. Average is the window sum (in scan order) divided by the count.
pub fn pool_real(x: &[f32], input: [usize; 3], win: &PoolWindow, kind: PoolKind) -> Result<(Vec<f32>, [usize; 3])> {
    let count = win.count() as f32;
    match kind {
        PoolKind::Avg => pool_generic(x, input, win, |v| v, |a, b| a + b, |s| s / count),
        PoolKind::Max => pool_generic(x, input, win, |v| v, f32::max, |m| m),
    }
}

/// Integer pooling of pre-activations: average keeps the window sum (the
/// following threshold absorbs the positive 1/count factor).
pub fn pool_int(x: &[i32], input: [usize; 3], win: &PoolWindow, kind: PoolKind) -> Result<(Vec<i32>, [usize; 3])> {
    match kind {
        PoolKind::Avg => pool_generic(x, input, win, |v| v, |a, b| a + b, |s| s),
        PoolKind::Max => pool_generic(x, input, win, |v| v, i32::max, |m| m),
    }
}

fn pool_tensor(x: &RealTensor, win: &PoolWindow, kind: PoolKind) -> Result<RealTensor> {
    let input = as3(x.shape())?;
    let (data, shape) = pool_real(x.data(), input, win, kind)?;
    RealTensor::new(shape.to_vec(), data)
}

/// Non-overlapping temporal average pool; a trailing partial window is dropped.
pub fn avg_pool(x: &RealTensor, window: usize) -> Result<RealTensor> {
    pool_tensor(x, &PoolWindow::temporal(window), PoolKind::Avg)
}

pub fn max_pool(x: &RealTensor, window: usize) -> Result<RealTensor> {
    pool_tensor(x, &PoolWindow::temporal(window), PoolKind::Max)
}

/// Max pooling on ±1 data is a logical OR over the window.
pub fn max_pool_bits(x: &BitTensor, win: &PoolWindow) -> Result<BitTensor> {
    let input = as3(x.shape())?;
    let bools: Vec<bool> = (0..x.len()).map(|i| x.get(i)).collect();
    let (out, shape) = pool_generic(&bools, input, win, |v| v, |a, b| a | b, |v| v)?;
    BitTensor::from_bools(shape.to_vec(), &out)
}

// ---------------------------------------------------------------------------
// Activations

#[inline]
pub fn relu(z: f32) -> f32 {
    z.max(0.0)
}

#[inline]
pub fn hardtanh(z: f32) -> f32 {
    z.clamp(-1.0, 1.0)
}

pub fn activate(x: &RealTensor, kind: Activation) -> Result<FeatureMap> {
    let map = |f: fn(f32) -> f32| {
        RealTensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    };
    Ok(match kind {
        Activation::Relu => FeatureMap::Real(map(relu)?),
        Activation::Hardtanh => FeatureMap::Real(map(hardtanh)?),
        Activation::None => FeatureMap::Real(x.clone()),
        Activation::Sign => FeatureMap::Bits(bitcore::pack(x)?),
    })
}

// ---------------------------------------------------------------------------
// Folding bias / batch-norm + sign into integer thresholds

/// Fold an output stage followed by `sign` into one integer comparison per
/// channel.
///
/// `fan_in` bounds the ±1 accumulation to `[-fan_in, fan_in]`; with mean
/// pooling the thresholded value is the window sum. The returned thresholds
/// reproduce `sign(norm(reduce(a)))` exactly for every integer `a` in range,
/// because the search evaluates that very expression.
pub fn fold_output_stage(
    norm: &OutputNorm,
    channels: usize,
    fan_in: usize,
    reduce: PoolReduce,
) -> Result<Vec<BinaryThreshold>> {
    if let OutputNorm::BatchNorm(bn) = norm {
        bn.validate()?;
    }
    if let Some(c) = norm.channels() {
        if c != channels {
            return Err(Error::shape(format!(
                "output stage has {c} channels, layer has {channels}"
            )));
        }
    }
    let hi = fan_in as i64 * reduce.span();
    let lo = -hi;
    if hi >= i32::MAX as i64 - 1 || hi >= (1 << 24) {
        return Err(Error::Capacity(format!(
            "accumulation range ±{hi} exceeds exact f32 integers"
        )));
    }
    (0..channels)
        .map(|ch| {
            let increasing = match norm {
                OutputNorm::BatchNorm(bn) => {
                    let s = bn.scale[ch];
                    if s == 0.0 {
                        return Err(Error::DegenerateBn { channel: ch });
                    }
                    s > 0.0
                }
                _ => true,
            };
            let fires = |s: i64| sign_bit(norm.apply(ch, reduce.value(s)));
            Ok(search_threshold(fires, increasing, lo, hi))
        })
        .collect()
}

/// Monotone predicate over `[lo, hi]` → equivalent comparison.
fn search_threshold(fires: impl Fn(i64) -> bool, increasing: bool, lo: i64, hi: i64) -> BinaryThreshold {
    if increasing {
        // smallest s with fires(s); hi + 1 if none
        let (mut a, mut b) = (lo, hi + 1);
        while a < b {
            let m = a + (b - a) / 2;
            if fires(m) {
                b = m;
            } else {
                a = m + 1;
            }
        }
        BinaryThreshold {
            value: a as i32,
            direction: Direction::AtLeast,
        }
    } else {
        // largest s with fires(s); lo - 1 if none
        let (mut a, mut b) = (lo - 1, hi);
        while a < b {
            let m = a + (b - a + 1) / 2;
            if fires(m) {
                a = m;
            } else {
                b = m - 1;
            }
        }
        BinaryThreshold {
            value: a as i32,
            direction: Direction::AtMost,
        }
    }
}

/// Fold batch-norm followed by `sign` over integer pre-activations in
/// `[-fan_in, fan_in]`. A negative scale flips the comparison direction.
pub fn fold_batchnorm(bn: &BatchNormParams, fan_in: usize) -> Result<Vec<BinaryThreshold>> {
    fold_output_stage(
        &OutputNorm::BatchNorm(bn.clone()),
        bn.channels(),
        fan_in,
        PoolReduce::None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_bits(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> BitTensor {
        let n: usize = shape.iter().product();
        let b: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        BitTensor::from_bools(shape, &b).unwrap()
    }

    fn real_dense(w: Vec<f32>, out: usize, inp: usize, b: Vec<f32>) -> DenseLayer {
        DenseLayer::new(
            LayerWeights::Real(RealTensor::new(vec![out, inp], w).unwrap()),
            Thresholds::Real(b),
        )
        .unwrap()
    }

    #[test]
    fn dense_real_examples() {
        let id = real_dense(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0, 0.0]);
        let x = RealTensor::from_vec(vec![3.0, 4.0]).unwrap();
        assert_eq!(dense_real(&x, &id).unwrap().data(), &[3.0, 4.0]);

        let l = real_dense(vec![1.0, -1.0], 1, 2, vec![0.5]);
        let x = RealTensor::from_vec(vec![2.0, 1.0]).unwrap();
        assert_eq!(dense_real(&x, &l).unwrap().data(), &[1.5]);

        let bad = RealTensor::from_vec(vec![1.0]).unwrap();
        assert!(matches!(dense_real(&bad, &l), Err(Error::Shape { .. })));
    }

    #[test]
    fn dense_real_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (out, inp) = (8, 16);
        let w: Vec<f32> = (0..out * inp).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f32> = (0..inp).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = real_dense(w.clone(), out, inp, b.clone());
        let got = dense_real(&RealTensor::from_vec(x.clone()).unwrap(), &layer).unwrap();
        for k in 0..out {
            let mut acc = 0.0f32;
            for j in 0..inp {
                acc += w[k * inp + j] * x[j];
            }
            assert_eq!(got.data()[k], acc + b[k]);
        }
    }

    #[test]
    fn dense_binary_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 40;
        let x = rand_bits(&mut rng, vec![n]);
        let same = DenseLayer::new(
            LayerWeights::Binary(x.clone().reshape(vec![1, n]).unwrap()),
            Thresholds::Binary(vec![BinaryThreshold::at_least(n as i32)]),
        )
        .unwrap();
        assert!(dense_binary(&x, &same).unwrap().get(0));
        let opposite = DenseLayer::new(
            LayerWeights::Binary(x.not().reshape(vec![1, n]).unwrap()),
            Thresholds::Binary(vec![BinaryThreshold::at_least(1)]),
        )
        .unwrap();
        assert!(!dense_binary(&x, &opposite).unwrap().get(0));
    }

    #[test]
    fn dense_binary_rejects_real_weights() {
        let l = real_dense(vec![1.0, -1.0], 1, 2, vec![0.0]);
        let x = BitTensor::minus_ones(vec![2]);
        assert!(matches!(dense_binary(&x, &l), Err(Error::RealWeightsInBinaryPath)));
    }

    #[test]
    fn dense_binary_matches_float_emulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (out, n) = (32, 256);
        let w = rand_bits(&mut rng, vec![out, n]);
        let x = rand_bits(&mut rng, vec![n]);
        let th: Vec<i32> = (0..out).map(|_| rng.random_range(-40..40)).collect();
        let layer = DenseLayer::new(
            LayerWeights::Binary(w.clone()),
            Thresholds::Binary(th.iter().map(|&t| BinaryThreshold::at_least(t)).collect()),
        )
        .unwrap();
        let got = dense_binary(&x, &layer).unwrap();
        let wf = bitcore::unpack(&w);
        let xf = bitcore::unpack(&x);
        for k in 0..out {
            let dot: f32 = (0..n).map(|j| wf.data()[k * n + j] * xf.data()[j]).sum();
            // a positive rescaling of the pre-threshold quantity changes nothing
            assert_eq!(got.get(k), sign_bit(3.5 * (dot - th[k] as f32)));
        }
    }

    #[test]
    fn conv_shapes_match_published_rows() {
        let g = ConvGeometry::temporal(15);
        assert_eq!(conv_output_shape([960, 64, 1], [40, 30, 1, 1], &g).unwrap(), [961, 64, 40]);
        let g = ConvGeometry::temporal(0);
        assert_eq!(conv_output_shape([961, 64, 40], [40, 1, 64, 40], &g).unwrap(), [961, 1, 40]);
        assert_eq!(conv_output_shape([750, 1, 12], [32, 13, 1, 12], &g).unwrap(), [738, 1, 32]);
        assert!(conv_output_shape([5, 1, 1], [1, 7, 1, 1], &g).is_err());
    }

    #[test]
    fn conv1d_runs_the_eeg_first_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x: Vec<f32> = (0..960 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = FeatureMap::Real(RealTensor::new(vec![960, 64, 1], x).unwrap());
        let w: Vec<f32> = (0..40 * 30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = ConvLayer::new(
            LayerWeights::Real(RealTensor::new(vec![40, 30, 1, 1], w).unwrap()),
            ConvGeometry::temporal(15),
            Thresholds::Real(vec![0.0; 40]),
        )
        .unwrap();
        let y = conv1d(&x, &layer, ConvMode::TemporalPerChannel).unwrap();
        assert_eq!(y.shape(), &[961, 64, 40]);
        assert!(conv1d(&x, &layer, ConvMode::AcrossChannels).is_err());
    }

    #[test]
    fn identity_kernel_is_identity() {
        let data: Vec<f32> = (0..20).map(|i| i as f32 - 7.5).collect();
        let x = FeatureMap::Real(RealTensor::new(vec![20, 1, 1], data.clone()).unwrap());
        let layer = ConvLayer::new(
            LayerWeights::Real(RealTensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap()),
            ConvGeometry::temporal(0),
            Thresholds::Real(vec![0.0]),
        )
        .unwrap();
        let y = conv1d(&x, &layer, ConvMode::TemporalPerChannel).unwrap();
        assert_eq!(y.to_real().data(), &data[..]);
    }

    #[test]
    fn binary_conv_padding_is_excluded() {
        // all +1 input and kernel: every valid term contributes +1, so the
        // edge outputs count only the in-range taps
        let x = BitTensor::from_bools(vec![6, 1, 1], &[true; 6]).unwrap();
        let w = BitTensor::from_bools(vec![1, 3, 1, 1], &[true; 3]).unwrap();
        let (acc, shape) = conv_binary(&x, [6, 1, 1], &w, [1, 3, 1, 1], &ConvGeometry::temporal(1)).unwrap();
        assert_eq!(shape, [6, 1, 1]);
        assert_eq!(acc, vec![2, 3, 3, 3, 3, 2]);
    }

    #[test]
    fn binary_conv_matches_float_emulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let t = rng.random_range(3..30);
            let h = rng.random_range(1..5);
            let c = rng.random_range(1..70);
            let f = rng.random_range(1..5);
            let kt = rng.random_range(1..=t.min(6));
            let kh = rng.random_range(1..=h);
            let geom = ConvGeometry {
                stride: [rng.random_range(1..3), rng.random_range(1..3)],
                padding: [rng.random_range(0..3), rng.random_range(0..2)],
                depthwise: false,
            };
            let x = rand_bits(&mut rng, vec![t, h, c]);
            let w = rand_bits(&mut rng, vec![f, kt, kh, c]);
            let (acc, s1) = conv_binary(&x, [t, h, c], &w, [f, kt, kh, c], &geom).unwrap();
            let (fl, s2) = conv_real(
                bitcore::unpack(&x).data(),
                [t, h, c],
                bitcore::unpack(&w).data(),
                [f, kt, kh, c],
                &geom,
            )
            .unwrap();
            assert_eq!(s1, s2);
            assert_eq!(acc.iter().map(|&a| a as f32).collect::<Vec<_>>(), fl);
        }
    }

    #[test]
    fn pool_lengths() {
        let eeg = PoolWindow {
            size: [30, 1],
            stride: [15, 1],
        };
        assert_eq!(eeg.output_shape([961, 1, 40]).unwrap(), [63, 1, 40]);
        assert_eq!(PoolWindow::temporal(30).output_shape([961, 1, 40]).unwrap(), [32, 1, 40]);
        assert_eq!(PoolWindow::temporal(2).output_shape([738, 1, 32]).unwrap(), [369, 1, 32]);
        assert!(PoolWindow::temporal(10).output_shape([5, 1, 1]).is_err());
    }

    #[test]
    fn pooling_values() {
        let x = RealTensor::new(vec![5, 1, 1], vec![1.0, 3.0, -2.0, 4.0, 9.0]).unwrap();
        assert_eq!(avg_pool(&x, 2).unwrap().data(), &[2.0, 1.0]);
        assert_eq!(max_pool(&x, 2).unwrap().data(), &[3.0, 4.0]);
        let c = RealTensor::new(vec![6, 1, 2], vec![0.25; 12]).unwrap();
        assert!(max_pool(&c, 3).unwrap().data().iter().all(|&v| v == 0.25));
        let b = BitTensor::from_bools(vec![4, 1, 1], &[false, true, false, false]).unwrap();
        let o = max_pool_bits(&b, &PoolWindow::temporal(2)).unwrap();
        assert_eq!((o.get(0), o.get(1)), (true, false));
    }

    #[test]
    fn activation_examples() {
        let x = RealTensor::from_vec(vec![-1.0, 2.0]).unwrap();
        assert_eq!(activate(&x, Activation::Relu).unwrap().to_real().data(), &[0.0, 2.0]);
        let x = RealTensor::from_vec(vec![-3.0, 0.5, 3.0]).unwrap();
        assert_eq!(activate(&x, Activation::Hardtanh).unwrap().to_real().data(), &[-1.0, 0.5, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let r = RealTensor::from_vec((0..100).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(
            activate(&r, Activation::Sign).unwrap(),
            FeatureMap::Bits(bitcore::pack(&r).unwrap())
        );
    }

    fn reference(bn: &BatchNormParams, ch: usize, a: i64) -> bool {
        sign_bit(bn.apply(ch, a as f32))
    }

    #[test]
    fn fold_identity_bn_is_sign() {
        let bn = BatchNormParams {
            epsilon: 1e-12,
            ..BatchNormParams::identity(1)
        };
        let th = fold_batchnorm(&bn, 10).unwrap();
        assert_eq!(th[0], BinaryThreshold::at_least(0));
    }

    #[test]
    fn fold_matches_reference_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=64usize {
            let c = 6;
            let bn = BatchNormParams {
                mean: (0..c).map(|_| rng.random_range(-(n as f32)..n as f32)).collect(),
                variance: (0..c).map(|_| rng.random_range(0.0..4.0 * n as f32)).collect(),
                scale: (0..c)
                    .map(|_| {
                        let s: f32 = rng.random_range(0.05..2.0);
                        if rng.random() { s } else { -s }
                    })
                    .collect(),
                shift: (0..c).map(|_| rng.random_range(-2.0..2.0)).collect(),
                epsilon: 1e-5,
            };
            let th = fold_batchnorm(&bn, n).unwrap();
            for ch in 0..c {
                for a in -(n as i64)..=n as i64 {
                    assert_eq!(th[ch].fires(a as i32), reference(&bn, ch, a), "n={n} ch={ch} a={a}");
                }
            }
        }
    }

    #[test]
    fn fold_negative_scale_flips_direction() {
        let bn = BatchNormParams {
            mean: vec![2.0],
            variance: vec![1.0],
            scale: vec![-1.0],
            shift: vec![0.0],
            epsilon: 1e-6,
        };
        let th = fold_batchnorm(&bn, 8).unwrap();
        assert_eq!(th[0].direction, Direction::AtMost);
        for a in -8..=8 {
            assert_eq!(th[0].fires(a), reference(&bn, 0, a as i64));
        }
    }

    #[test]
    fn fold_zero_scale_is_degenerate() {
        let mut bn = BatchNormParams::identity(3);
        bn.scale[1] = 0.0;
        assert!(matches!(fold_batchnorm(&bn, 4), Err(Error::DegenerateBn { channel: 1 })));
    }

    #[test]
    fn fold_with_mean_pool_uses_window_sum() {
        let bn = BatchNormParams {
            mean: vec![0.3],
            variance: vec![2.0],
            scale: vec![1.5],
            shift: vec![-0.4],
            epsilon: 1e-5,
        };
        let norm = OutputNorm::BatchNorm(bn.clone());
        let reduce = PoolReduce::Mean(30);
        let th = fold_output_stage(&norm, 1, 7, reduce).unwrap();
        for s in -210..=210 {
            assert_eq!(th[0].fires(s), sign_bit(bn.apply(0, s as f32 / 30.0)));
        }
    }
}
