//! Desk-scale training of real, classifier-binarized and fully binarized
//! networks with straight-through gradients and Adam.

pub mod dataset;
mod network;

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use dataset::{
    augment_noise, load_csv_signals, make_synthetic, make_synthetic_with, normalize_per_channel, read_csv_signals,
    save_csv_signals, write_csv_signals, Dataset, Normalization, SyntheticParams, SyntheticTask,
};
pub use network::AdamConfig;

use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::model::{argmax, Model};
use crate::netspec::{Group, LayerKind, NetworkSpec, Precision};
use crate::rram::mean_std;
use network::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Real,
    BinaryClassifier,
    AllBinary,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Self::Real),
            "binary_classifier" | "binclf" => Ok(Self::BinaryClassifier),
            "all_binary" | "binary" => Ok(Self::AllBinary),
            _ => Err(Error::InvalidValue(format!(
                "unknown strategy '{s}' (expected real, binary_classifier or all_binary)"
            ))),
        }
    }
}

/// Rewrite layer precisions for a training strategy.
///
/// Binary layers get batch-norm (no bias) and a sign activation, except the
/// output layer which keeps its raw normalized scores. A real layer feeding a
/// binary one switches to a sign activation. With `first_layer_real`, the
/// first weighted layer stays real under `AllBinary`.
pub fn apply_strategy(spec: &NetworkSpec, strategy: Strategy, first_layer_real: bool) -> Result<NetworkSpec> {
    let mut s = spec.clone();
    let params = s.param_layers();
    let Some(&last) = params.last() else {
        return Err(Error::Config("network has no weighted layers".into()));
    };
    let binary: Vec<usize> = match strategy {
        Strategy::Real => {
            for &i in &params {
                if s.layers[i].precision == Precision::Binary {
                    s.layers[i].precision = Precision::Float32;
                }
            }
            return Ok(s);
        }
        Strategy::BinaryClassifier => params
            .iter()
            .copied()
            .filter(|&i| s.group_of(i) == Group::Classifier)
            .collect(),
        Strategy::AllBinary => params.iter().copied().skip(first_layer_real as usize).collect(),
    };
    for &i in &binary {
        let l = &mut s.layers[i];
        if l.kind == LayerKind::DepthwiseConv {
            return Err(Error::Unsupported(format!("binarizing depthwise layer {i}")));
        }
        l.precision = Precision::Binary;
        l.batchnorm = true;
        l.bias = false;
        l.activation = if i == last { Activation::None } else { Activation::Sign };
    }
    for (k, &i) in params.iter().enumerate().skip(1) {
        if s.layers[i].precision == Precision::Binary && s.layers[params[k - 1]].precision != Precision::Binary {
            s.layers[params[k - 1]].activation = Activation::Sign;
        }
    }
    s.validate()?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Standard deviation of Gaussian noise added to every training batch.
    pub noise_sigma: f32,
    pub keep_conv: f32,
    pub keep_classifier: f32,
    pub folds: usize,
    pub seed: u64,
    pub first_layer_real: bool,
    /// Normalize inputs per channel with training-split statistics.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            noise_sigma: 0.0,
            keep_conv: 1.0,
            keep_classifier: 1.0,
            folds: 5,
            seed: 0,
            first_layer_real: false,
            normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        for k in [self.keep_conv, self.keep_classifier] {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::Config(format!("keep probability {k} outside (0, 1]")));
            }
        }
        if !(self.adam.lr > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("learning rate must be > 0 and noise sigma >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Deployable model: binary output stages folded to integer thresholds.
    pub model: Model,
    /// Same weights with unfolded output stages, as evaluated during training.
    pub reference: Model,
    pub history: Vec<EpochRecord>,
    pub normalization: Option<Normalization>,
}

impl TrainOutcome {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.val_accuracy)
    }

    /// (epoch, accuracy) of the best validation epoch.
    pub fn best_val(&self) -> Option<(usize, f64)> {
        self.history
            .iter()
            .filter_map(|r| r.val_accuracy.map(|a| (r.epoch, a)))
            .fold(None, |best, (e, a)| match best {
                Some((_, b)) if b >= a => best,
                _ => Some((e, a)),
            })
    }

    pub fn history_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss\ttrain_accuracy\tval_accuracy\n");
        for r in &self.history {
            let val = r.val_accuracy.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!("{}\t{:.6}\t{:.4}\t{val}\n", r.epoch, r.loss, r.train_accuracy));
        }
        s
    }
}

fn check_shapes(spec: &NetworkSpec, ds: &Dataset) -> Result<()> {
    let want = spec.input_shapes()?.remove(0);
    if want != ds.sample_shape().to_vec() {
        return Err(Error::shape(format!(
            "dataset samples are {:?}, network expects {want:?}",
            ds.sample_shape()
        )));
    }
    Ok(())
}

/// Accuracy of the engine (`Model::forward`) over a dataset.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<f64> {
    Ok(accuracy(&model.predict_many(&ds.tensors())?, ds.labels()))
}

fn evaluate_emulated(model: &Model, ds: &Dataset) -> Result<f64> {
    let preds = ds
        .tensors()
        .par_iter()
        .map(|x| Ok(argmax(&model.forward_emulated(x)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy(&preds, ds.labels()))
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Train on all of `ds`.
pub fn train(spec: &NetworkSpec, ds: &Dataset, cfg: &TrainConfig, strategy: Strategy) -> Result<TrainOutcome> {
    train_with_validation(spec, ds, None, cfg, strategy)
}

/// Train on `train_ds`, reporting validation accuracy of the float-emulated
/// forward pass after every epoch.
pub fn train_with_validation(
    spec: &NetworkSpec,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    cfg: &TrainConfig,
    strategy: Strategy,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = apply_strategy(spec, strategy, cfg.first_layer_real)?;
    check_shapes(&spec, train_ds)?;
    if train_ds.len() < 2 {
        return Err(Error::Config("need at least two training samples".into()));
    }
    let (train_ds, val_ds, normalization) = if cfg.normalize {
        let n = train_ds.fit_normalization();
        let v = val_ds.map(|v| v.apply_normalization(&n)).transpose()?;
        (train_ds.apply_normalization(&n)?, v, Some(n))
    } else {
        (train_ds.clone(), val_ds.cloned(), None)
    };
    let mut net = Network::new(&spec, cfg.keep_conv, cfg.keep_classifier, cfg.seed)?;
    if net.classes < train_ds.classes() {
        return Err(Error::shape(format!(
            "network has {} outputs for {} classes",
            net.classes,
            train_ds.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let per = train_ds.sample_len();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0f64, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // A single-sample batch has no batch statistics.
            if chunk.len() < 2 {
                continue;
            }
            let mut x = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                x.extend_from_slice(train_ds.sample(i));
            }
            augment_noise(&mut x, cfg.noise_sigma, &mut rng)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_ds.labels()[i]).collect();
            let (loss, ok) = net.train_batch(&x, &labels, &cfg.adam, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += ok;
            seen += chunk.len();
        }
        let val_accuracy = match &val_ds {
            Some(v) => Some(evaluate_emulated(&net.export()?, v)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val_accuracy,
        });
        log::debug!("epoch {epoch}: {:?}", history.last());
    }
    let reference = net.export()?;
    let model = reference.fold()?;
    Ok(TrainOutcome {
        model,
        reference,
        history,
        normalization,
    })
}

/// Shuffle `0..n` with `seed` and cut it into `k` contiguous folds whose sizes
/// differ by at most one.
pub fn fold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("cannot split {n} samples into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + (f < extra) as usize;
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub validation_size: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_final: f64,
    pub std_final: f64,
    pub mean_best: f64,
    pub std_best: f64,
}

/// k-fold cross-validation; every fold trains a freshly initialised model.
pub fn cross_validate(spec: &NetworkSpec, ds: &Dataset, cfg: &TrainConfig, strategy: Strategy) -> Result<CvReport> {
    cfg.validate()?;
    let folds = fold_indices(ds.len(), cfg.folds, cfg.seed)?;
    if let Some(small) = folds.iter().map(Vec::len).min().filter(|&m| m < cfg.batch_size) {
        return Err(Error::Config(format!(
            "validation fold of {small} samples is smaller than batch size {}",
            cfg.batch_size
        )));
    }
    let mut results = Vec::with_capacity(folds.len());
    for (f, val_idx) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let out = train_with_validation(
            spec,
            &ds.subset(&train_idx),
            Some(&ds.subset(val_idx)),
            cfg,
            strategy,
        )?;
        let (best_epoch, best_accuracy) = out.best_val().unwrap_or((0, 0.0));
        results.push(FoldResult {
            fold: f,
            validation_size: val_idx.len(),
            final_accuracy: out.final_val_accuracy().unwrap_or(0.0),
            best_accuracy,
            best_epoch,
        });
    }
    let finals: Vec<f64> = results.iter().map(|r| r.final_accuracy).collect();
    let bests: Vec<f64> = results.iter().map(|r| r.best_accuracy).collect();
    let (mean_final, std_final) = mean_std(&finals);
    let (mean_best, std_best) = mean_std(&bests);
    Ok(CvReport {
        folds: results,
        mean_final,
        std_final,
        mean_best,
        std_best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::builtin;

    #[test]
    fn folds_partition_indices() {
        let folds = fold_indices(100, 5, 3).unwrap();
        assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![20; 5]);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(folds, fold_indices(100, 5, 3).unwrap());
        let uneven = fold_indices(103, 5, 1).unwrap();
        let sizes: Vec<usize> = uneven.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn small_fold_rejected() {
        let ds = make_synthetic(SyntheticTask::Separable, 40, 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            ..TrainConfig::default()
        };
        let spec = builtin("desk_dense").unwrap();
        assert!(matches!(cross_validate(&spec, &ds, &cfg, Strategy::Real), Err(Error::Config(_))));
    }

    #[test]
    fn strategies_rewrite_precisions() {
        let spec = builtin("desk_conv").unwrap();
        let clf = apply_strategy(&spec, Strategy::BinaryClassifier, false).unwrap();
        assert_eq!(clf.layers[0].precision, Precision::Float32);
        assert_eq!(clf.layers[2].activation, Activation::Sign);
        assert_eq!(clf.layers[5].precision, Precision::Binary);
        assert_eq!(clf.layers[6].activation, Activation::None);
        let all = apply_strategy(&spec, Strategy::AllBinary, false).unwrap();
        assert!(all.param_layers().iter().all(|&i| all.layers[i].precision == Precision::Binary));
        let first = apply_strategy(&spec, Strategy::AllBinary, true).unwrap();
        assert_eq!(first.layers[0].precision, Precision::Float32);
        assert_eq!(first.layers[0].activation, Activation::Sign);
    }

    #[test]
    fn separable_task_learned() {
        let ds = make_synthetic(SyntheticTask::Separable, 200, 1).unwrap();
        let spec = builtin("desk_dense").unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 20,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let real = train(&spec, &ds, &cfg, Strategy::Real).unwrap();
        let norm = ds.apply_normalization(real.normalization.as_ref().unwrap()).unwrap();
        assert!(evaluate(&real.model, &norm).unwrap() >= 0.99);
        let bin = train(&spec, &ds, &cfg, Strategy::AllBinary).unwrap();
        assert!(evaluate(&bin.model, &norm).unwrap() >= 0.95);
    }

    #[test]
    fn engine_matches_training_forward() {
        let ds = make_synthetic(SyntheticTask::ConvPattern, 120, 2).unwrap();
        let spec = builtin("desk_conv").unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        for strategy in [Strategy::BinaryClassifier, Strategy::AllBinary] {
            let out = train(&spec, &ds, &cfg, strategy).unwrap();
            let norm = ds.apply_normalization(out.normalization.as_ref().unwrap()).unwrap();
            for x in norm.tensors() {
                assert_eq!(out.model.forward(&x).unwrap(), out.reference.forward_emulated(&x).unwrap());
            }
        }
    }
}
