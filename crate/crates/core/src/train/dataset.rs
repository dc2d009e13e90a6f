//! Labelled multichannel signal sets: normalization, noise augmentation, CSV
//! ingestion and synthetic tasks.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::bitcore::RealTensor;
use crate::error::{Error, Result};

/// Per-slot statistics, one slot per (height, channel) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Samples of shape `[time, height, channels]` stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: [usize; 3],
    data: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
    normalization: Option<Normalization>,
}

/// Variance floor below which a slot is treated as constant.
pub const VARIANCE_EPS: f64 = 1e-12;

impl Dataset {
    pub fn new(sample_shape: [usize; 3], data: Vec<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 {
            return Err(Error::shape("sample shape must be positive"));
        }
        if data.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} values for {} samples of {per}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidValue(format!("label {l} >= class count {classes}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite sample value".into()));
        }
        Ok(Self {
            sample_shape,
            data,
            labels,
            classes,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn tensor(&self, i: usize) -> RealTensor {
        RealTensor::new(self.sample_shape.to_vec(), self.sample(i).to_vec()).expect("dataset samples are valid")
    }

    pub fn tensors(&self) -> Vec<RealTensor> {
        (0..self.len()).map(|i| self.tensor(i)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape,
            data,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            normalization: self.normalization.clone(),
        }
    }

    /// Mean and standard deviation per (height, channel) slot over all samples
    /// and time steps.
    pub fn fit_normalization(&self) -> Normalization {
        let [_, h, c] = self.sample_shape;
        let slots = h * c;
        let mut sum = vec![0f64; slots];
        let mut sq = vec![0f64; slots];
        for (k, &v) in self.data.iter().enumerate() {
            sum[k % slots] += v as f64;
        }
        let count = (self.data.len() / slots).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        for (k, &v) in self.data.iter().enumerate() {
            let d = v as f64 - mean[k % slots];
            sq[k % slots] += d * d;
        }
        let mut std = Vec::with_capacity(slots);
        for (s, q) in sq.iter().enumerate() {
            let var = q / count;
            if var < VARIANCE_EPS {
                log::warn!("slot {s} is constant; normalizing with an epsilon guard");
                std.push(1.0);
            } else {
                std.push(var.sqrt() as f32);
            }
        }
        Normalization {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        }
    }

    pub fn apply_normalization(&self, norm: &Normalization) -> Result<Dataset> {
        let slots = self.sample_shape[1] * self.sample_shape[2];
        if norm.mean.len() != slots || norm.std.len() != slots {
            return Err(Error::shape(format!(
                "normalization has {} slots, data has {slots}",
                norm.mean.len()
            )));
        }
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let s = k % slots;
                ((v as f64 - norm.mean[s] as f64) / norm.std[s] as f64) as f32
            })
            .collect();
        Ok(Dataset {
            data,
            normalization: Some(norm.clone()),
            ..self.clone()
        })
    }
}

/// Zero-mean, unit-variance per channel using this dataset's own statistics.
pub fn normalize_per_channel(ds: &Dataset) -> Dataset {
    ds.apply_normalization(&ds.fit_normalization()).expect("statistics match the data")
}

/// Add zero-mean Gaussian noise in place.
pub fn augment_noise(batch: &mut [f32], sigma: f32, rng: &mut impl Rng) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidValue(format!("noise sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::InvalidValue(e.to_string()))?;
    for v in batch {
        *v += normal.sample(rng);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV
//
// Header row whose first column is `label`; every following row holds the
// class index then `time × channels` values, time-major (all channels of t=0,
// then t=1, ...).

pub fn read_csv_signals(reader: impl std::io::Read, channels: usize) -> Result<Dataset> {
    if channels == 0 {
        return Err(Error::InvalidValue("channel count must be positive".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?,
        None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
    };
    if header.get(0).map(str::trim) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            msg: "first header column must be 'label'".into(),
        });
    }
    let values = header.len() - 1;
    if values == 0 {
        return Err(Error::shape("CSV declares zero-length samples"));
    }
    if values % channels != 0 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{values} value columns are not a multiple of {channels} channels"),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (k, rec) in records.enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("{} fields, header has {}", rec.len(), header.len()),
            });
        }
        let label = rec[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Parse { line, msg: format!("bad label '{}'", &rec[0]) })?;
        labels.push(label);
        for f in rec.iter().skip(1) {
            let v = f
                .trim()
                .parse::<f32>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse { line, msg: format!("bad value '{f}'") })?;
            data.push(v);
        }
    }
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new([values / channels, 1, channels], data, labels, classes)
}

pub fn load_csv_signals(path: impl AsRef<Path>, channels: usize) -> Result<Dataset> {
    read_csv_signals(std::fs::File::open(path)?, channels)
}

pub fn write_csv_signals(ds: &Dataset, writer: impl std::io::Write) -> Result<()> {
    let [t, h, c] = ds.sample_shape();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["label".to_string()];
    for ti in 0..t {
        for k in 0..h * c {
            header.push(format!("t{ti}_c{k}"));
        }
    }
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    for i in 0..ds.len() {
        let mut rec = vec![ds.labels()[i].to_string()];
        rec.extend(ds.sample(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv_signals(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv_signals(ds, std::fs::File::create(path)?)
}

// ---------------------------------------------------------------------------
// Synthetic tasks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Two Gaussian clouds, 16 features.
    Separable,
    /// Class = sign(x0)·sign(x1) over 8 features, 6 of them noise.
    XorLike,
    /// Two channels of noise with a class-specific motif at a random offset.
    ConvPattern,
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Self::Separable),
            "xor_like" | "xor" => Ok(Self::XorLike),
            "conv_pattern" => Ok(Self::ConvPattern),
            _ => Err(Error::InvalidValue(format!(
                "unknown synthetic task '{s}' (expected separable, xor_like or conv_pattern)"
            ))),
        }
    }
}

/// Difficulty knobs; [`make_synthetic`] uses [`SyntheticParams::default`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    /// Class-mean offset (separable), or motif amplitude (conv_pattern).
    pub signal: f32,
    pub noise: f32,
}

impl SyntheticParams {
    pub fn default_for(task: SyntheticTask) -> Self {
        match task {
            SyntheticTask::Separable => Self { signal: 0.6, noise: 1.0 },
            SyntheticTask::XorLike => Self { signal: 1.0, noise: 0.1 },
            SyntheticTask::ConvPattern => Self { signal: 2.0, noise: 1.0 },
        }
    }
}

pub const CONV_PATTERN_SHAPE: [usize; 3] = [64, 1, 2];
pub const MOTIF_LEN: usize = 12;

pub fn make_synthetic(task: SyntheticTask, n: usize, seed: u64) -> Result<Dataset> {
    make_synthetic_with(task, n, seed, SyntheticParams::default_for(task))
}

pub fn make_synthetic_with(task: SyntheticTask, n: usize, seed: u64, p: SyntheticParams) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidValue(format!("need at least 2 samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0f32, p.noise.max(0.0)).map_err(|e| Error::InvalidValue(e.to_string()))?;
    let (shape, data) = match task {
        SyntheticTask::Separable => {
            let d = 16;
            // Fixed direction so that different seeds sample the same task.
            let dir: Vec<f32> = (0..d).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
            let mut data = Vec::with_capacity(n * d);
            for &y in &labels {
                let s = if y == 1 { p.signal } else { -p.signal };
                data.extend(dir.iter().map(|&u| s * u + noise.sample(&mut rng)));
            }
            ([d, 1, 1], data)
        }
        SyntheticTask::XorLike => {
            let d = 8;
            let mut data = Vec::with_capacity(n * d);
            for &y in &labels {
                let a: f32 = rng.random_range(0.2..1.0) * p.signal;
                let b: f32 = rng.random_range(0.2..1.0) * p.signal;
                let sa = if rng.random() { 1.0 } else { -1.0 };
                let sb = if y == 1 { sa } else { -sa };
                data.push(sa * a);
                data.push(sb * b);
                data.extend((2..d).map(|_| rng.random_range(-1.0..1.0)));
            }
            ([d, 1, 1], data)
        }
        SyntheticTask::ConvPattern => {
            let [t, _, c] = CONV_PATTERN_SHAPE;
            let mut data = Vec::with_capacity(n * t * c);
            for &y in &labels {
                let mut s: Vec<f32> = (0..t * c).map(|_| noise.sample(&mut rng)).collect();
                let start = rng.random_range(0..=t - MOTIF_LEN);
                for k in 0..MOTIF_LEN {
                    let (m0, m1) = motif(y, k);
                    s[(start + k) * c] += p.signal * m0;
                    s[(start + k) * c + 1] += p.signal * m1;
                }
                data.extend(s);
            }
            (CONV_PATTERN_SHAPE, data)
        }
    };
    Dataset::new(shape, data, labels, 2)
}

/// Class motifs: the same oscillation on both channels, in phase for class 0
/// and in anti-phase for class 1, so per-channel energy carries no label.
fn motif(class: usize, k: usize) -> (f32, f32) {
    let phase = 2.0 * std::f32::consts::PI * k as f32 / MOTIF_LEN as f32;
    let a = phase.sin() * 1.5;
    if class == 0 {
        (a, a)
    } else {
        (a, -a)
    }
}
