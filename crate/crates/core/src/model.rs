//! Parameterised networks and the inference engine.

use rayon::prelude::*;

use crate::bitcore::{self, BitTensor, RealTensor};
use crate::error::{Error, Result};
use crate::layers::{
    self, Activation, BinaryThreshold, FeatureMap, OutputNorm, PoolKind, PoolReduce,
};
use crate::netspec::{LayerDescriptor, NetworkSpec, Precision, Stage};

/// What follows the integer accumulation of a binary layer.
#[derive(Debug, Clone, PartialEq)]
pub enum BinaryStage {
    /// Folded bias/batch-norm + sign.
    Thresholds(Vec<BinaryThreshold>),
    /// Unfolded output stage, evaluated in f32 on the accumulation.
    Norm(OutputNorm),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Real { weights: RealTensor, norm: OutputNorm },
    Binary { weights: BitTensor, stage: BinaryStage },
}

impl LayerParams {
    pub fn binary_weights_mut(&mut self) -> Option<&mut BitTensor> {
        match self {
            LayerParams::Binary { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn binary_weights(&self) -> Option<&BitTensor> {
        match self {
            LayerParams::Binary { weights, .. } => Some(weights),
            _ => None,
        }
    }
}

/// A network description together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerParams>,
}

fn map3(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [t, h, c] => Ok([t, h, c]),
        _ => Err(Error::shape(format!("expected a [t, h, c] map, got {shape:?}"))),
    }
}

fn pool_reduce(desc: Option<&LayerDescriptor>) -> PoolReduce {
    match desc.and_then(|d| d.pool_kind().map(|k| (k, d))) {
        Some((PoolKind::Avg, d)) => PoolReduce::Mean(d.pool_window().count()),
        Some((PoolKind::Max, _)) => PoolReduce::Max,
        None => PoolReduce::None,
    }
}

impl Model {
    pub fn new(spec: NetworkSpec, layers: Vec<LayerParams>) -> Result<Self> {
        let ins = spec.input_shapes()?;
        if layers.len() != spec.layers.len() {
            return Err(Error::shape(format!(
                "{} parameter sets for {} layers",
                layers.len(),
                spec.layers.len()
            )));
        }
        for (i, ((desc, input), p)) in spec.layers.iter().zip(&ins).zip(&layers).enumerate() {
            let at = |msg: String| Error::shape_at(i, msg);
            if !desc.kind.has_params() {
                if !matches!(p, LayerParams::None) {
                    return Err(at(format!("{:?} takes no parameters", desc.kind)));
                }
                continue;
            }
            let shape = desc.weight_shape(input)?;
            let channels = desc.out_channels(input);
            let check_norm = |n: &OutputNorm| match n.channels() {
                Some(c) if c != channels => Err(at(format!("output stage has {c} channels, layer has {channels}"))),
                _ => Ok(()),
            };
            match (desc.precision, p) {
                (Precision::Binary, LayerParams::Binary { weights, stage }) => {
                    if weights.shape() != shape.as_slice() {
                        return Err(at(format!("binary weights {:?}, expected {shape:?}", weights.shape())));
                    }
                    match stage {
                        BinaryStage::Thresholds(th) => {
                            if th.len() != channels {
                                return Err(at(format!("{} thresholds for {channels} outputs", th.len())));
                            }
                            if desc.activation != Activation::Sign {
                                return Err(at("folded thresholds require a sign activation".into()));
                            }
                        }
                        BinaryStage::Norm(n) => check_norm(n)?,
                    }
                }
                (Precision::Binary, LayerParams::Real { .. }) => return Err(Error::RealWeightsInBinaryPath),
                (_, LayerParams::Real { weights, norm }) => {
                    if weights.shape() != shape.as_slice() {
                        return Err(at(format!("weights {:?}, expected {shape:?}", weights.shape())));
                    }
                    check_norm(norm)?;
                }
                (_, other) => {
                    return Err(at(format!(
                        "{:?} layer given {} parameters",
                        desc.precision,
                        match other {
                            LayerParams::None => "no",
                            _ => "binary",
                        }
                    )))
                }
            }
        }
        Ok(Self { spec, layers })
    }

    /// Replace every unfolded binary output stage that feeds a sign by its
    /// integer thresholds.
    pub fn fold(&self) -> Result<Model> {
        let ins = self.spec.input_shapes()?;
        let mut layers = self.layers.clone();
        for stage in self.spec.stages() {
            let Stage::Param { layer, pool } = stage else { continue };
            let desc = &self.spec.layers[layer];
            if desc.activation != Activation::Sign {
                continue;
            }
            if let LayerParams::Binary { weights, stage: BinaryStage::Norm(norm) } = &self.layers[layer] {
                let shape = desc.weight_shape(&ins[layer])?;
                let fan_in: usize = shape[1..].iter().product();
                let reduce = pool_reduce(pool.map(|p| &self.spec.layers[p]));
                let th = layers::fold_output_stage(norm, shape[0], fan_in, reduce)
                    .map_err(|e| match e {
                        Error::Shape { msg, .. } => Error::shape_at(layer, msg),
                        other => other,
                    })?;
                layers[layer] = LayerParams::Binary {
                    weights: weights.clone(),
                    stage: BinaryStage::Thresholds(th),
                };
            }
        }
        Model::new(self.spec.clone(), layers)
    }

    fn check_input(&self, x: &RealTensor) -> Result<[usize; 3]> {
        let want = self.spec.input_shapes()?.remove(0);
        if x.len() != want.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "input has {} values, model expects {want:?}",
                x.len()
            )));
        }
        map3(&want)
    }

    /// Run the engine: binary layers use XNOR-popcount and integer thresholds.
    pub fn forward(&self, x: &RealTensor) -> Result<Vec<f32>> {
        self.run(x, false, None)
    }

    /// Same network evaluated with f32 arithmetic on ±1 values (binary layers
    /// must carry unfolded output stages).
    pub fn forward_emulated(&self, x: &RealTensor) -> Result<Vec<f32>> {
        self.run(x, true, None)
    }

    /// Forward pass that also returns every stage's output map.
    pub fn forward_trace(&self, x: &RealTensor) -> Result<Vec<FeatureMap>> {
        let mut trace = Vec::new();
        self.run(x, false, Some(&mut trace))?;
        Ok(trace)
    }

    pub fn predict(&self, x: &RealTensor) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn predict_many(&self, xs: &[RealTensor]) -> Result<Vec<usize>> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }

    fn run(&self, x: &RealTensor, emulate: bool, mut trace: Option<&mut Vec<FeatureMap>>) -> Result<Vec<f32>> {
        let in3 = self.check_input(x)?;
        let mut cur = FeatureMap::Real(x.clone().reshape(in3.to_vec())?);
        for stage in self.spec.stages() {
            cur = match stage {
                Stage::Param { layer, pool } => self
                    .param_stage(cur, layer, pool, emulate)
                    .map_err(|e| match e {
                        Error::Shape { layer: None, msg } => Error::shape_at(layer, msg),
                        other => other,
                    })?,
                Stage::Pool(i) => standalone_pool(cur, &self.spec.layers[i])?,
                Stage::Flatten(_) => match cur {
                    FeatureMap::Real(t) => {
                        let n = t.len();
                        FeatureMap::Real(t.reshape(vec![n])?)
                    }
                    FeatureMap::Bits(b) => {
                        let n = b.len();
                        FeatureMap::Bits(b.reshape(vec![n])?)
                    }
                },
            };
            if let Some(t) = trace.as_deref_mut() {
                t.push(cur.clone());
            }
        }
        Ok(cur.to_real().into_data())
    }

    fn param_stage(&self, x: FeatureMap, i: usize, pool: Option<usize>, emulate: bool) -> Result<FeatureMap> {
        let desc = &self.spec.layers[i];
        let pool_desc = pool.map(|p| &self.spec.layers[p]);
        match &self.layers[i] {
            LayerParams::Real { weights, norm } => {
                let xr = x.to_real();
                let (acc, shape) = accumulate_real(desc, xr.data(), xr.shape(), weights.data(), weights.shape())?;
                let (mut v, shape) = match pool_desc {
                    Some(pd) => {
                        let (v, s) = layers::pool_real(&acc, map3(&shape)?, &pd.pool_window(), pd.pool_kind().unwrap())?;
                        (v, s.to_vec())
                    }
                    None => (acc, shape),
                };
                let channels = *shape.last().unwrap();
                norm.apply_all(&mut v, channels);
                layers::activate(&RealTensor::new(shape, v)?, desc.activation)
            }
            LayerParams::Binary { weights, stage } => {
                if emulate {
                    let BinaryStage::Norm(norm) = stage else {
                        return Err(Error::Unsupported("float emulation of folded thresholds".into()));
                    };
                    let xr = bitcore::unpack(&x.to_bits()?);
                    let wr = bitcore::unpack(weights);
                    let (acc, shape) = accumulate_real(desc, xr.data(), xr.shape(), wr.data(), wr.shape())?;
                    let (mut v, shape) = match pool_desc {
                        Some(pd) => {
                            let (v, s) =
                                layers::pool_real(&acc, map3(&shape)?, &pd.pool_window(), pd.pool_kind().unwrap())?;
                            (v, s.to_vec())
                        }
                        None => (acc, shape),
                    };
                    let channels = *shape.last().unwrap();
                    norm.apply_all(&mut v, channels);
                    return layers::activate(&RealTensor::new(shape, v)?, desc.activation);
                }
                let xb = x.to_bits()?;
                let (acc, shape) = accumulate_binary(desc, &xb, weights)?;
                let (s, shape) = match pool_desc {
                    Some(pd) => {
                        let (v, s) = layers::pool_int(&acc, map3(&shape)?, &pd.pool_window(), pd.pool_kind().unwrap())?;
                        (v, s.to_vec())
                    }
                    None => (acc, shape),
                };
                let channels = *shape.last().unwrap();
                match stage {
                    BinaryStage::Thresholds(th) => {
                        let bits: Vec<bool> = s.iter().enumerate().map(|(k, &a)| th[k % channels].fires(a)).collect();
                        Ok(FeatureMap::Bits(BitTensor::from_bools(shape, &bits)?))
                    }
                    BinaryStage::Norm(norm) => {
                        let reduce = pool_reduce(pool_desc);
                        let v: Vec<f32> = s
                            .iter()
                            .enumerate()
                            .map(|(k, &a)| norm.apply(k % channels, reduce.value(a as i64)))
                            .collect();
                        layers::activate(&RealTensor::new(shape, v)?, desc.activation)
                    }
                }
            }
            LayerParams::None => Err(Error::shape_at(i, "layer has no parameters")),
        }
    }

    /// Number of binary weight bits per layer (0 for other layers).
    pub fn binary_bits(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|p| p.binary_weights().map_or(0, |w| w.len()))
            .collect()
    }
}

fn accumulate_real(
    desc: &LayerDescriptor,
    x: &[f32],
    x_shape: &[usize],
    w: &[f32],
    w_shape: &[usize],
) -> Result<(Vec<f32>, Vec<usize>)> {
    if desc.kind.is_dense() {
        if x_shape.len() != 1 {
            return Err(Error::shape(format!("dense layer needs a flat input, got {x_shape:?}")));
        }
        let v = layers::dense_accumulate_real(x, w, w_shape[0])?;
        let n = v.len();
        return Ok((v, vec![n]));
    }
    let kernel = [w_shape[0], w_shape[1], w_shape[2], w_shape[3]];
    let (v, s) = layers::conv_real(x, map3(x_shape)?, w, kernel, &desc.conv_geometry())?;
    Ok((v, s.to_vec()))
}

fn accumulate_binary(desc: &LayerDescriptor, x: &BitTensor, w: &BitTensor) -> Result<(Vec<i32>, Vec<usize>)> {
    let ws = w.shape();
    if desc.kind.is_dense() {
        if x.shape().len() != 1 {
            return Err(Error::shape(format!("dense layer needs a flat input, got {:?}", x.shape())));
        }
        let v = layers::dense_accumulate_binary(x, w, ws[0])?;
        let n = v.len();
        return Ok((v, vec![n]));
    }
    let kernel = [ws[0], ws[1], ws[2], ws[3]];
    let (v, s) = layers::conv_binary(x, map3(x.shape())?, w, kernel, &desc.conv_geometry())?;
    Ok((v, s.to_vec()))
}

fn standalone_pool(x: FeatureMap, desc: &LayerDescriptor) -> Result<FeatureMap> {
    let win = desc.pool_window();
    let kind = desc.pool_kind().unwrap();
    match x {
        FeatureMap::Real(t) => {
            let (v, s) = layers::pool_real(t.data(), map3(t.shape())?, &win, kind)?;
            Ok(FeatureMap::Real(RealTensor::new(s.to_vec(), v)?))
        }
        FeatureMap::Bits(b) => match kind {
            PoolKind::Max => Ok(FeatureMap::Bits(layers::max_pool_bits(&b, &win)?)),
            PoolKind::Avg => Err(Error::Unsupported(
                "average pooling of binary activations".into(),
            )),
        },
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
