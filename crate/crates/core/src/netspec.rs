//! Network descriptors: layer kinds, shape inference, parameter counting,
//! filter augmentation, the built-in architectures and the model file format.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bitcore::{BitTensor, RealTensor};
use crate::error::{Error, Result};
use crate::layers::{Activation, BatchNormParams, BinaryThreshold, ConvGeometry, Direction, OutputNorm, PoolKind, PoolWindow};
use crate::model::{BinaryStage, LayerParams, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    ConvTemporal,
    ConvSpatial,
    Conv2d,
    DepthwiseConv,
    PointwiseConv,
    AvgPool,
    MaxPool,
    Flatten,
    Dense,
    /// Dense output head whose logits feed a softmax (used only by the loss).
    Softmax,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            LayerKind::ConvTemporal
                | LayerKind::ConvSpatial
                | LayerKind::Conv2d
                | LayerKind::DepthwiseConv
                | LayerKind::PointwiseConv
        )
    }

    pub fn is_dense(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Softmax)
    }

    /// Layers that carry weights.
    pub fn has_params(self) -> bool {
        self.is_conv() || self.is_dense()
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::AvgPool | LayerKind::MaxPool)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Float32,
    Int8,
    Binary,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::Float32 => 32,
            Precision::Int8 => 8,
            Precision::Binary => 1,
        }
    }
}

fn unit_pair() -> [usize; 2] {
    [1, 1]
}

fn no_activation() -> Activation {
    Activation::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub kind: LayerKind,
    /// `[time, height]` extent of a kernel or pooling window.
    #[serde(default = "unit_pair")]
    pub kernel: [usize; 2],
    #[serde(default)]
    pub padding: [usize; 2],
    #[serde(default = "unit_pair")]
    pub stride: [usize; 2],
    /// Filters for convolutions, units for dense layers, classes for softmax.
    #[serde(default)]
    pub units: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub batchnorm: bool,
    #[serde(default)]
    pub bias: bool,
    #[serde(default = "no_activation")]
    pub activation: Activation,
}

impl LayerDescriptor {
    fn base(kind: LayerKind) -> Self {
        Self {
            kind,
            kernel: [1, 1],
            padding: [0, 0],
            stride: [1, 1],
            units: 0,
            precision: Precision::Float32,
            batchnorm: false,
            bias: false,
            activation: Activation::None,
        }
    }

    pub fn conv_temporal(filters: usize, kernel_t: usize, padding: usize) -> Self {
        Self {
            kernel: [kernel_t, 1],
            padding: [padding, 0],
            units: filters,
            ..Self::base(LayerKind::ConvTemporal)
        }
    }

    pub fn conv_spatial(filters: usize, kernel_h: usize) -> Self {
        Self {
            kernel: [1, kernel_h],
            units: filters,
            ..Self::base(LayerKind::ConvSpatial)
        }
    }

    pub fn conv2d(filters: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: [kernel, kernel],
            stride: [stride, stride],
            padding: [padding, padding],
            units: filters,
            ..Self::base(LayerKind::Conv2d)
        }
    }

    pub fn depthwise(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: [kernel, kernel],
            stride: [stride, stride],
            padding: [padding, padding],
            ..Self::base(LayerKind::DepthwiseConv)
        }
    }

    pub fn pointwise(filters: usize) -> Self {
        Self {
            units: filters,
            ..Self::base(LayerKind::PointwiseConv)
        }
    }

    pub fn avg_pool(window: [usize; 2], stride: [usize; 2]) -> Self {
        Self {
            kernel: window,
            stride,
            ..Self::base(LayerKind::AvgPool)
        }
    }

    pub fn max_pool(window: usize) -> Self {
        Self {
            kernel: [window, 1],
            stride: [window, 1],
            ..Self::base(LayerKind::MaxPool)
        }
    }

    pub fn flatten() -> Self {
        Self::base(LayerKind::Flatten)
    }

    pub fn dense(units: usize) -> Self {
        Self {
            units,
            ..Self::base(LayerKind::Dense)
        }
    }

    pub fn softmax(classes: usize) -> Self {
        Self {
            units: classes,
            bias: true,
            ..Self::base(LayerKind::Softmax)
        }
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn with_batchnorm(mut self) -> Self {
        self.batchnorm = true;
        self.bias = false;
        self
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self
    }

    pub fn pool_window(&self) -> PoolWindow {
        PoolWindow {
            size: self.kernel,
            stride: self.stride,
        }
    }

    pub fn pool_kind(&self) -> Option<PoolKind> {
        match self.kind {
            LayerKind::AvgPool => Some(PoolKind::Avg),
            LayerKind::MaxPool => Some(PoolKind::Max),
            _ => None,
        }
    }

    pub fn conv_geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            padding: self.padding,
            depthwise: self.kind == LayerKind::DepthwiseConv,
        }
    }

    /// Weight tensor shape for an input of shape `input`.
    pub fn weight_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (self.kind, input) {
            (LayerKind::DepthwiseConv, &[_, _, c]) => Ok(vec![c, self.kernel[0], self.kernel[1], 1]),
            (k, &[_, _, c]) if k.is_conv() => Ok(vec![self.units, self.kernel[0], self.kernel[1], c]),
            (k, &[n]) if k.is_dense() => Ok(vec![self.units, n]),
            _ => Err(Error::shape(format!(
                "{:?} has no weights for input {input:?}",
                self.kind
            ))),
        }
    }

    /// Output channels (filters / units) given the input shape.
    pub fn out_channels(&self, input: &[usize]) -> usize {
        match (self.kind, input) {
            (LayerKind::DepthwiseConv, &[_, _, c]) => c,
            _ => self.units,
        }
    }

    /// Bias plus batch-norm parameter count.
    pub fn aux_params(&self, input: &[usize]) -> usize {
        if !self.kind.has_params() {
            return 0;
        }
        let c = self.out_channels(input);
        (if self.bias { c } else { 0 }) + (if self.batchnorm { 4 * c } else { 0 })
    }

    fn label(&self) -> String {
        match self.kind {
            LayerKind::ConvTemporal | LayerKind::ConvSpatial | LayerKind::Conv2d => format!("Conv {}", self.units),
            LayerKind::DepthwiseConv => "Conv dw".to_string(),
            LayerKind::PointwiseConv => format!("Conv pw {}", self.units),
            LayerKind::AvgPool => "Avg. pool".to_string(),
            LayerKind::MaxPool => "Max. pool".to_string(),
            LayerKind::Flatten => "Flatten".to_string(),
            LayerKind::Dense => format!("FC {}", self.units),
            LayerKind::Softmax => "Softmax".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// `[time, height, channels]` (or `[height, width, channels]` for images).
    pub input_shape: Vec<usize>,
    #[serde(default = "one")]
    pub augmentation: usize,
    pub layers: Vec<LayerDescriptor>,
}

fn one() -> usize {
    1
}

/// Output shape of one layer: a `[t, h, c]` map or a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn elements(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join(" × "))
    }
}

/// Which side of the first flatten a layer sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    FeatureExtractor,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub index: usize,
    pub kind: LayerKind,
    pub group: Group,
    pub weights: usize,
    /// Biases and batch-norm parameters.
    pub aux: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.weights + self.aux
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub layers: Vec<LayerCount>,
    pub feature_extractor: usize,
    pub classifier: usize,
    pub total: usize,
}

/// One execution step; a parametric layer absorbs an immediately following
/// pool so that pooling acts on pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Param { layer: usize, pool: Option<usize> },
    Pool(usize),
    Flatten(usize),
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<LayerDescriptor>) -> Self {
        Self {
            name: name.into(),
            input_shape,
            augmentation: 1,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::shape("input shape must have positive dimensions"));
        }
        if self.augmentation == 0 {
            return Err(Error::InvalidValue("augmentation must be >= 1".into()));
        }
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel.contains(&0) || l.stride.contains(&0) {
                return Err(Error::shape_at(i, "kernel and stride must be positive"));
            }
            if l.kind.has_params() && l.kind != LayerKind::DepthwiseConv && l.units == 0 {
                return Err(Error::shape_at(i, "filter/unit count must be positive"));
            }
            if l.kind == LayerKind::Softmax && i != last {
                return Err(Error::shape_at(i, "softmax must be the terminal layer"));
            }
            if l.precision == Precision::Binary
                && l.kind.has_params()
                && !matches!(l.activation, Activation::Sign | Activation::None)
            {
                return Err(Error::shape_at(
                    i,
                    "binary layers must use sign or no activation",
                ));
            }
        }
        Ok(())
    }

    /// Index of the first flatten, the feature-extractor / classifier boundary.
    pub fn classifier_boundary(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.kind == LayerKind::Flatten)
    }

    pub fn group_of(&self, index: usize) -> Group {
        match self.classifier_boundary() {
            Some(b) if index > b => Group::Classifier,
            Some(_) => Group::FeatureExtractor,
            None if self.layers[index].kind.is_dense() => Group::Classifier,
            None => Group::FeatureExtractor,
        }
    }

    /// Output shape of every layer; fails at the first inconsistent layer.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        self.validate()?;
        let mut cur = self.input_shape.clone();
        if cur.len() == 2 {
            cur = vec![cur[0], 1, cur[1]];
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            cur = layer_output(i, l, &cur)?;
            checked_product(&cur).ok_or_else(|| Error::Capacity(format!("layer {i} output overflows")))?;
            out.push(Shape(cur.clone()));
        }
        Ok(out)
    }

    /// Input shape seen by each layer.
    pub fn input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let outs = self.infer_shapes()?;
        let mut first = self.input_shape.clone();
        if first.len() == 2 {
            first = vec![first[0], 1, first[1]];
        }
        let mut ins = vec![first];
        ins.extend(outs.iter().take(self.layers.len().saturating_sub(1)).map(|s| s.0.clone()));
        Ok(ins)
    }

    pub fn count_params(&self) -> Result<ParamCount> {
        let ins = self.input_shapes()?;
        let mut layers = Vec::new();
        let (mut fe, mut clf) = (0usize, 0usize);
        for (i, (l, input)) in self.layers.iter().zip(&ins).enumerate() {
            let weights = if l.kind.has_params() {
                checked_product(&l.weight_shape(input)?)
                    .ok_or_else(|| Error::Capacity(format!("layer {i} weights overflow")))?
            } else {
                0
            };
            let aux = l.aux_params(input);
            let group = self.group_of(i);
            match group {
                Group::FeatureExtractor => fe += weights + aux,
                Group::Classifier => clf += weights + aux,
            }
            layers.push(LayerCount {
                index: i,
                kind: l.kind,
                group,
                weights,
                aux,
            });
        }
        Ok(ParamCount {
            layers,
            feature_extractor: fe,
            classifier: clf,
            total: fe + clf,
        })
    }

    /// Multiply every convolution's filter count by `k`.
    pub fn augment(&self, k: usize) -> Result<NetworkSpec> {
        if k == 0 {
            return Err(Error::InvalidValue("augmentation factor must be >= 1".into()));
        }
        let mut spec = self.clone();
        for (i, l) in spec.layers.iter_mut().enumerate() {
            if l.kind.is_conv() && l.kind != LayerKind::DepthwiseConv {
                l.units = l
                    .units
                    .checked_mul(k)
                    .ok_or_else(|| Error::Capacity(format!("layer {i} filter count overflows")))?;
            }
        }
        spec.augmentation = spec
            .augmentation
            .checked_mul(k)
            .ok_or_else(|| Error::Capacity("augmentation factor overflows".into()))?;
        spec.count_params()?;
        Ok(spec)
    }

    pub fn stages(&self) -> Vec<Stage> {
        let mut stages = Vec::new();
        let mut i = 0;
        while i < self.layers.len() {
            let l = &self.layers[i];
            if l.kind.has_params() {
                let pool = (i + 1 < self.layers.len() && self.layers[i + 1].kind.is_pool()).then_some(i + 1);
                stages.push(Stage::Param { layer: i, pool });
                i += if pool.is_some() { 2 } else { 1 };
            } else {
                stages.push(if l.kind.is_pool() { Stage::Pool(i) } else { Stage::Flatten(i) });
                i += 1;
            }
        }
        stages
    }

    /// Indices of weight-carrying layers.
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].kind.has_params()).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NetworkSpec = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Aligned table with layer, kernel, padding and output-shape columns.
    pub fn shape_table(&self) -> Result<Vec<ShapeRow>> {
        let shapes = self.infer_shapes()?;
        let ins = self.input_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(shapes)
            .zip(ins)
            .map(|((l, shape), input)| ShapeRow {
                layer: l.label(),
                kernel: kernel_label(l, &input),
                padding: padding_label(l),
                output: shape,
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub layer: String,
    pub kernel: String,
    pub padding: String,
    pub output: Shape,
}

fn kernel_label(l: &LayerDescriptor, input: &[usize]) -> String {
    if l.kind.is_pool() {
        return format!("{} × {}", l.kernel[0], l.kernel[1]);
    }
    match (l.kind.is_conv(), input) {
        (true, &[_, _, c]) if c > 1 && l.kind != LayerKind::DepthwiseConv => {
            format!("{} × {} × {c}", l.kernel[0], l.kernel[1])
        }
        (true, _) => format!("{} × {}", l.kernel[0], l.kernel[1]),
        _ => "-".to_string(),
    }
}

fn padding_label(l: &LayerDescriptor) -> String {
    match l.padding {
        _ if !l.kind.is_conv() && !l.kind.is_pool() => "-".to_string(),
        [0, 0] => "No".to_string(),
        [p, 0] => p.to_string(),
        [p, q] => format!("{p} × {q}"),
    }
}

fn checked_product(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn layer_output(i: usize, l: &LayerDescriptor, input: &[usize]) -> Result<Vec<usize>> {
    let as_map = |input: &[usize]| -> Result<[usize; 3]> {
        match *input {
            [t, h, c] => Ok([t, h, c]),
            _ => Err(Error::shape_at(i, format!("{:?} needs a [t, h, c] input, got {input:?}", l.kind))),
        }
    };
    let wrap = |e: Error| match e {
        Error::Shape { msg, .. } => Error::shape_at(i, msg),
        other => other,
    };
    match l.kind {
        k if k.is_conv() => {
            let map = as_map(input)?;
            if k == LayerKind::ConvTemporal && l.kernel[1] != 1 {
                return Err(Error::shape_at(i, "temporal convolution needs kernel height 1"));
            }
            if k == LayerKind::ConvSpatial && l.kernel[1] != map[1] {
                return Err(Error::shape_at(
                    i,
                    format!("spatial kernel height {} must span input height {}", l.kernel[1], map[1]),
                ));
            }
            if k == LayerKind::PointwiseConv && l.kernel != [1, 1] {
                return Err(Error::shape_at(i, "pointwise convolution needs a 1 × 1 kernel"));
            }
            let ws = l.weight_shape(input).map_err(wrap)?;
            let out = crate::layers::conv_output_shape(map, [ws[0], ws[1], ws[2], ws[3]], &l.conv_geometry())
                .map_err(wrap)?;
            Ok(out.to_vec())
        }
        k if k.is_pool() => {
            let out = l.pool_window().output_shape(as_map(input)?).map_err(wrap)?;
            Ok(out.to_vec())
        }
        LayerKind::Flatten => Ok(vec![checked_product(input)
            .ok_or_else(|| Error::Capacity(format!("layer {i} flatten overflows")))?]),
        _ => match input {
            [_] => Ok(vec![l.units]),
            _ => Err(Error::shape_at(i, format!("dense layer needs a flat input, got {input:?}"))),
        },
    }
}

// ---------------------------------------------------------------------------
// Built-in architectures

pub const BUILTIN_NAMES: [&str; 6] = [
    "eeg_dose",
    "ecg_custom",
    "mobilenet_v1_224",
    "mobilenet_v1_binclf",
    "desk_conv",
    "desk_dense",
];

/// Hidden width of the two-layer binarized MobileNet classifier:
/// 1024·w + w·1000 ≈ 5.7M binary weights.
pub const MOBILENET_BINCLF_HIDDEN: usize = 2816;

pub fn builtin(name: &str) -> Result<NetworkSpec> {
    use Activation::*;
    use LayerDescriptor as L;
    let spec = match name {
        "eeg_dose" => NetworkSpec::new(
            name,
            vec![960, 64, 1],
            vec![
                L::conv_temporal(40, 30, 15).with_bias().with_activation(Relu),
                L::conv_spatial(40, 64).with_bias().with_activation(Relu),
                L::avg_pool([30, 1], [15, 1]),
                L::flatten(),
                L::dense(80).with_bias().with_activation(Relu),
                L::softmax(2),
            ],
        ),
        "ecg_custom" => NetworkSpec::new(
            name,
            vec![750, 1, 12],
            vec![
                L::conv_temporal(32, 13, 0).with_batchnorm().with_activation(Hardtanh),
                L::max_pool(2),
                L::conv_temporal(32, 11, 0).with_batchnorm().with_activation(Hardtanh),
                L::max_pool(2),
                L::conv_temporal(32, 9, 0).with_batchnorm().with_activation(Hardtanh),
                L::conv_temporal(32, 7, 0).with_batchnorm().with_activation(Hardtanh),
                L::conv_temporal(32, 5, 0).with_batchnorm().with_activation(Hardtanh),
                L::flatten(),
                L::dense(75).with_batchnorm().with_activation(Hardtanh),
                L::softmax(2),
            ],
        ),
        "mobilenet_v1_224" => mobilenet(name, Option::None),
        "mobilenet_v1_binclf" => mobilenet(name, Some(MOBILENET_BINCLF_HIDDEN)),
        "desk_conv" => NetworkSpec::new(
            name,
            vec![64, 1, 2],
            vec![
                L::conv_temporal(8, 7, 0).with_batchnorm().with_activation(Hardtanh),
                L::max_pool(2),
                L::conv_temporal(8, 5, 0).with_batchnorm().with_activation(Hardtanh),
                L::max_pool(2),
                L::flatten(),
                L::dense(32).with_batchnorm().with_activation(Hardtanh),
                L::softmax(2),
            ],
        ),
        "desk_dense" => NetworkSpec::new(
            name,
            vec![16, 1, 1],
            vec![
                L::flatten(),
                L::dense(32).with_batchnorm().with_activation(Hardtanh),
                L::softmax(2),
            ],
        ),
        other => return Err(Error::UnknownModel(other.to_string())),
    };
    spec.validate()?;
    Ok(spec)
}

/// Reference model whose uniform-precision footprint a built-in's savings are
/// measured against.
pub fn builtin_baseline(name: &str) -> Option<&'static str> {
    match name {
        "mobilenet_v1_binclf" => Some("mobilenet_v1_224"),
        _ => None,
    }
}

/// MobileNet-V1 (width 1.0, 224 × 224) after the public definition: BN after
/// every convolution, no convolution biases.
fn mobilenet(name: &str, binary_hidden: Option<usize>) -> NetworkSpec {
    use Activation::*;
    use LayerDescriptor as L;
    let mut layers = vec![L::conv2d(32, 3, 2, 1).with_batchnorm().with_activation(Relu)];
    let blocks: [(usize, usize); 13] = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    for (filters, stride) in blocks {
        layers.push(L::depthwise(3, stride, 1).with_batchnorm().with_activation(Relu));
        layers.push(L::pointwise(filters).with_batchnorm().with_activation(Relu));
    }
    layers.push(L::avg_pool([7, 7], [7, 7]));
    layers.push(L::flatten());
    match binary_hidden {
        Option::None => layers.push(L::softmax(1000)),
        Some(w) => {
            layers.push(
                L::dense(w)
                    .with_bias()
                    .with_activation(Sign)
                    .with_precision(Precision::Binary),
            );
            layers.push(L::softmax(1000).with_precision(Precision::Binary));
        }
    }
    NetworkSpec::new(name, vec![224, 224, 3], layers)
}

/// Resolve a built-in name or a path to a TOML spec file.
pub fn resolve(name_or_path: &str) -> Result<NetworkSpec> {
    match builtin(name_or_path) {
        Ok(s) => Ok(s),
        Err(Error::UnknownModel(_)) if Path::new(name_or_path).is_file() => {
            NetworkSpec::from_toml(&std::fs::read_to_string(name_or_path)?)
        }
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// Model file
//
// Little-endian throughout:
//
//   magic    8 bytes  "XNRMODEL"
//   version  u32
//   spec     u32 length + UTF-8 TOML
//   layers   u32 count, then per descriptor:
//              u8 tag: 0 = no params, 1 = real, 2 = binary
//              real:   u32 n, n × f32 weights, norm
//              binary: u32 n bits, ceil(n/64) × u64 words, u8 stage
//                      stage 1: u32 c, c × i32 thresholds, c × u8 direction (0 ≥, 1 ≤)
//                      stage 2: norm
//   norm     u8 tag: 0 none, 1 bias (u32 c, c × f32),
//                    2 batch-norm (u32 c, f32 eps, mean, variance, scale, shift as c × f32 each)
//   checksum u32 CRC-32 of every preceding byte

pub const MODEL_MAGIC: &[u8; 8] = b"XNRMODEL";
pub const MODEL_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Capacity(format!("length {v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn norm(&mut self, n: &OutputNorm) -> Result<()> {
        match n {
            OutputNorm::None => self.u8(0),
            OutputNorm::Bias(b) => {
                self.u8(1);
                self.len(b.len())?;
                self.f32s(b);
            }
            OutputNorm::BatchNorm(bn) => {
                self.u8(2);
                self.len(bn.channels())?;
                self.f32s(&[bn.epsilon]);
                self.f32s(&bn.mean);
                self.f32s(&bn.variance);
                self.f32s(&bn.scale);
                self.f32s(&bn.shift);
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptModel("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn expect_len(&mut self, expected: usize, what: &str) -> Result<()> {
        let n = self.u32()? as usize;
        if n != expected {
            return Err(Error::Format(format!("{what}: blob holds {n} entries, spec requires {expected}")));
        }
        Ok(())
    }
    fn norm(&mut self, channels: usize) -> Result<OutputNorm> {
        match self.u8()? {
            0 => Ok(OutputNorm::None),
            1 => {
                self.expect_len(channels, "bias")?;
                Ok(OutputNorm::Bias(self.f32s(channels)?))
            }
            2 => {
                self.expect_len(channels, "batch-norm")?;
                let epsilon = self.f32s(1)?[0];
                let bn = BatchNormParams {
                    epsilon,
                    mean: self.f32s(channels)?,
                    variance: self.f32s(channels)?,
                    scale: self.f32s(channels)?,
                    shift: self.f32s(channels)?,
                };
                bn.validate().map_err(|e| Error::Format(e.to_string()))?;
                Ok(OutputNorm::BatchNorm(bn))
            }
            t => Err(Error::Format(format!("unknown norm tag {t}"))),
        }
    }
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    let spec = model.spec.to_toml()?;
    w.len(spec.len())?;
    w.0.extend_from_slice(spec.as_bytes());
    w.len(model.layers.len())?;
    for p in &model.layers {
        match p {
            LayerParams::None => w.u8(0),
            LayerParams::Real { weights, norm } => {
                w.u8(1);
                w.len(weights.len())?;
                w.f32s(weights.data());
                w.norm(norm)?;
            }
            LayerParams::Binary { weights, stage } => {
                w.u8(2);
                w.len(weights.len())?;
                for word in weights.words() {
                    w.0.extend_from_slice(&word.to_le_bytes());
                }
                match stage {
                    BinaryStage::Thresholds(th) => {
                        w.u8(1);
                        w.len(th.len())?;
                        for t in th {
                            w.0.extend_from_slice(&t.value.to_le_bytes());
                        }
                        for t in th {
                            w.u8(match t.direction {
                                Direction::AtLeast => 0,
                                Direction::AtMost => 1,
                            });
                        }
                    }
                    BinaryStage::Norm(n) => {
                        w.u8(2);
                        w.norm(n)?;
                    }
                }
            }
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    Ok(w.0)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 12 || &bytes[..8] != MODEL_MAGIC {
        return Err(Error::CorruptModel("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(Error::CorruptModel("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptModel("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let spec_len = r.u32()? as usize;
    let spec_text = std::str::from_utf8(r.take(spec_len)?).map_err(|e| Error::Format(e.to_string()))?;
    let spec = NetworkSpec::from_toml(spec_text)?;
    let ins = spec.input_shapes()?;
    let n_layers = r.u32()? as usize;
    if n_layers != spec.layers.len() {
        return Err(Error::Format(format!(
            "{n_layers} layer blobs for {} descriptors",
            spec.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (i, (desc, input)) in spec.layers.iter().zip(&ins).enumerate() {
        let tag = r.u8()?;
        let expected_tag = match (desc.kind.has_params(), desc.precision) {
            (false, _) => 0,
            (true, Precision::Binary) => 2,
            (true, _) => 1,
        };
        if tag != expected_tag {
            return Err(Error::Format(format!("layer {i}: blob tag {tag}, expected {expected_tag}")));
        }
        let params = match tag {
            0 => LayerParams::None,
            1 => {
                let shape = desc.weight_shape(input)?;
                let n: usize = shape.iter().product();
                r.expect_len(n, "weights")?;
                let weights = RealTensor::new(shape, r.f32s(n)?)
                    .map_err(|e| Error::Format(format!("layer {i}: {e}")))?;
                let norm = r.norm(desc.out_channels(input))?;
                LayerParams::Real { weights, norm }
            }
            _ => {
                let shape = desc.weight_shape(input)?;
                let n: usize = shape.iter().product();
                r.expect_len(n, "binary weights")?;
                let nwords = n.div_ceil(64);
                let words = r
                    .take(nwords * 8)?
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let weights = BitTensor::from_raw_words(shape, words)?;
                let channels = desc.out_channels(input);
                let stage = match r.u8()? {
                    1 => {
                        r.expect_len(channels, "thresholds")?;
                        let values: Vec<i32> = r
                            .take(channels * 4)?
                            .chunks_exact(4)
                            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                            .collect();
                        let dirs = r.take(channels)?;
                        let th = values
                            .into_iter()
                            .zip(dirs)
                            .map(|(value, &d)| {
                                let direction = match d {
                                    0 => Direction::AtLeast,
                                    1 => Direction::AtMost,
                                    _ => return Err(Error::Format(format!("bad direction byte {d}"))),
                                };
                                Ok(BinaryThreshold { value, direction })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        BinaryStage::Thresholds(th)
                    }
                    2 => BinaryStage::Norm(r.norm(channels)?),
                    t => return Err(Error::Format(format!("unknown binary stage tag {t}"))),
                };
                LayerParams::Binary { weights, stage }
            }
        };
        layers.push(params);
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Model::new(spec, layers)
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(name: &str) -> Vec<String> {
        builtin(name)
            .unwrap()
            .infer_shapes()
            .unwrap()
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn eeg_shapes() {
        assert_eq!(
            shapes("eeg_dose"),
            ["961 × 64 × 40", "961 × 1 × 40", "63 × 1 × 40", "2520", "80", "2"]
        );
    }

    #[test]
    fn ecg_shapes() {
        assert_eq!(
            shapes("ecg_custom"),
            [
                "738 × 1 × 32",
                "369 × 1 × 32",
                "359 × 1 × 32",
                "179 × 1 × 32",
                "171 × 1 × 32",
                "165 × 1 × 32",
                "161 × 1 × 32",
                "5152",
                "75",
                "2"
            ]
        );
    }

    #[test]
    fn identity_conv_keeps_input_shape() {
        let spec = NetworkSpec::new("id", vec![20, 3, 1], vec![LayerDescriptor::conv_temporal(1, 1, 0)]);
        assert_eq!(spec.infer_shapes().unwrap(), vec![Shape(vec![20, 3, 1])]);
    }

    #[test]
    fn inconsistent_spec_reports_layer() {
        let spec = NetworkSpec::new(
            "bad",
            vec![10, 1, 1],
            vec![LayerDescriptor::conv_temporal(4, 3, 0), LayerDescriptor::dense(3)],
        );
        match spec.infer_shapes() {
            Err(Error::Shape { layer: Some(1), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let spec = NetworkSpec::new(
            "bad",
            vec![10, 1, 1],
            vec![LayerDescriptor::softmax(2), LayerDescriptor::flatten()],
        );
        assert!(matches!(spec.validate(), Err(Error::Shape { layer: Some(0), .. })));
    }

    #[test]
    fn eeg_param_counts() {
        let c = builtin("eeg_dose").unwrap().count_params().unwrap();
        assert_eq!(c.layers[4].total(), 2520 * 80 + 80);
        assert_eq!(c.total, 305_522);
        assert_eq!(c.classifier, 201_842);
        assert!((c.total as f64 / 1e6 - 0.31).abs() < 0.01);
        assert!((c.classifier as f64 / 1e6 - 0.2).abs() < 0.01);
    }

    #[test]
    fn mobilenet_param_counts() {
        let c = builtin("mobilenet_v1_224").unwrap().count_params().unwrap();
        assert_eq!(c.total, 4_253_864);
        assert_eq!(c.classifier, 1_025_000);
        let b = builtin("mobilenet_v1_binclf").unwrap().count_params().unwrap();
        let binary_weights: usize = b
            .layers
            .iter()
            .filter(|l| l.group == Group::Classifier)
            .map(|l| l.weights)
            .sum();
        assert!((binary_weights as f64 / 1e6 - 5.7).abs() < 0.01);
    }

    #[test]
    fn augmentation() {
        let eeg = builtin("eeg_dose").unwrap();
        assert_eq!(eeg.augment(1).unwrap(), eeg);
        let a11 = eeg.augment(11).unwrap();
        assert_eq!(a11.layers[0].units, 440);
        assert_eq!(a11.augmentation, 11);
        assert_eq!(
            eeg.augment(2).unwrap().augment(3).unwrap(),
            eeg.augment(6).unwrap()
        );
        assert!(matches!(eeg.augment(usize::MAX), Err(Error::Capacity(_))));

        let ecg = builtin("ecg_custom").unwrap();
        let base = ecg.count_params().unwrap();
        let a7 = ecg.augment(7).unwrap().count_params().unwrap();
        let conv = |c: &ParamCount| -> usize {
            c.layers.iter().filter(|l| l.group == Group::FeatureExtractor).map(|l| l.weights).sum()
        };
        assert!(conv(&a7) >= 7 * conv(&base));
    }

    #[test]
    fn unknown_builtin() {
        assert!(matches!(builtin("resnet"), Err(Error::UnknownModel(_))));
    }

    #[test]
    fn toml_roundtrip_preserves_counts() {
        for name in BUILTIN_NAMES {
            let spec = builtin(name).unwrap();
            let back = NetworkSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
            assert_eq!(back, spec);
            assert_eq!(back.count_params().unwrap(), spec.count_params().unwrap());
        }
    }

    #[test]
    fn stage_grouping() {
        let ecg = builtin("ecg_custom").unwrap();
        let st = ecg.stages();
        assert_eq!(st[0], Stage::Param { layer: 0, pool: Some(1) });
        assert_eq!(st[2], Stage::Param { layer: 4, pool: None });
        assert_eq!(st[5], Stage::Flatten(7));
    }
}
