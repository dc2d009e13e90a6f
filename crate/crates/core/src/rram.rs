//! Behavioural model of binary weights stored in resistive memory: device
//! states, differential (2T2R) and single-device (1T1R) cells, sense-amplifier
//! reads and cycling-dependent bit errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bitcore::{BitTensor, RealTensor};
use crate::error::{Error, Result};
use crate::model::{argmax, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Level {
    Lrs,
    Hrs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceState {
    pub level: Level,
    pub cycles: u64,
}

impl DeviceState {
    pub fn fresh() -> Self {
        Self {
            level: Level::Hrs,
            cycles: 0,
        }
    }

    fn program(&mut self, level: Level) {
        self.level = level;
        self.cycles += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CellMode {
    #[serde(rename = "1T1R")]
    T1R1,
    #[serde(rename = "2T2R")]
    T2R2,
}

impl fmt::Display for CellMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellMode::T1R1 => "1T1R",
            CellMode::T2R2 => "2T2R",
        })
    }
}

impl FromStr for CellMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1t1r" | "t1r1" => Ok(CellMode::T1R1),
            "2t2r" | "t2r2" => Ok(CellMode::T2R2),
            _ => Err(Error::Mode(format!("unknown cell mode '{s}' (expected 1T1R or 2T2R)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Devices {
    Single(DeviceState),
    /// Ordered (bit-line, complementary bit-line) pair.
    Pair(DeviceState, DeviceState),
}

/// One stored weight. A 1T1R cell stores +1 as LRS; a 2T2R cell stores +1 as
/// (LRS, HRS) and −1 as (HRS, LRS).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynapseCell {
    pub devices: Devices,
}

impl SynapseCell {
    pub fn new(mode: CellMode) -> Self {
        let devices = match mode {
            CellMode::T1R1 => Devices::Single(DeviceState::fresh()),
            CellMode::T2R2 => Devices::Pair(DeviceState::fresh(), DeviceState::fresh()),
        };
        Self { devices }
    }

    pub fn programmed(mode: CellMode, weight: i8) -> Self {
        let mut c = Self::new(mode);
        c.program(weight > 0);
        c
    }

    pub fn mode(&self) -> CellMode {
        match self.devices {
            Devices::Single(_) => CellMode::T1R1,
            Devices::Pair(..) => CellMode::T2R2,
        }
    }

    pub fn program(&mut self, plus_one: bool) {
        let (a, b) = if plus_one { (Level::Lrs, Level::Hrs) } else { (Level::Hrs, Level::Lrs) };
        match &mut self.devices {
            Devices::Single(d) => d.program(a),
            Devices::Pair(d0, d1) => {
                d0.program(a);
                d1.program(b);
            }
        }
    }

    /// Fault-free stored value.
    pub fn stored_weight(&self) -> i8 {
        let lrs = match self.devices {
            Devices::Single(d) => d.level == Level::Lrs,
            // The sense amplifier resolves toward the lower-resistance branch.
            Devices::Pair(d0, d1) => d0.level == Level::Lrs && d1.level == Level::Hrs,
        };
        if lrs {
            1
        } else {
            -1
        }
    }

    /// Programming cycles endured by the cell (the most-cycled device).
    pub fn cycles(&self) -> u64 {
        match self.devices {
            Devices::Single(d) => d.cycles,
            Devices::Pair(d0, d1) => d0.cycles.max(d1.cycles),
        }
    }

    fn age(&mut self, n: u64) {
        match &mut self.devices {
            Devices::Single(d) => d.cycles += n,
            Devices::Pair(d0, d1) => {
                d0.cycles += n;
                d1.cycles += n;
            }
        }
    }
}

/// Differential read of a 2T2R cell through the precharge sense amplifier;
/// the result is flipped with probability `ber`.
pub fn pcsa_read(cell: &SynapseCell, ber: f64, rng: &mut impl Rng) -> Result<i8> {
    pcsa_xnor_read(cell, 1, ber, rng)
}

/// Sense-amplifier read with the in-sense XNOR against `input` (±1).
pub fn pcsa_xnor_read(cell: &SynapseCell, input: i8, ber: f64, rng: &mut impl Rng) -> Result<i8> {
    if cell.mode() != CellMode::T2R2 {
        return Err(Error::Mode("sense-amplifier read needs a 2T2R cell".into()));
    }
    if !(0.0..=1.0).contains(&ber) {
        return Err(Error::InvalidValue(format!("bit-error rate {ber} outside [0, 1]")));
    }
    if input != 1 && input != -1 {
        return Err(Error::InvalidValue(format!("input bit must be ±1, got {input}")));
    }
    let flip = rng.random::<f64>() < ber;
    let w = if flip { -cell.stored_weight() } else { cell.stored_weight() };
    Ok(w * input)
}

/// Cycle-count → bit-error-probability table, interpolated linearly in
/// log10(cycles) between tabulated points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BerCurve {
    points: Vec<(u64, f64)>,
}

impl BerCurve {
    pub fn new(points: Vec<(u64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidValue("BER curve needs at least one point".into()));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidValue("BER curve cycles must be strictly increasing".into()));
            }
        }
        if let Some(&(_, p)) = points.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidValue(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self { points })
    }

    /// Same probability at every cycle count.
    pub fn constant(p: f64) -> Result<Self> {
        Self::new(vec![(0, p), (u64::MAX, p)])
    }

    /// Placeholder 1T1R curve: 1e-2 up to 10 cycles, rising to 5e-2 at 1e7.
    pub fn default_1t1r() -> Self {
        Self {
            points: DEFAULT_1T1R.to_vec(),
        }
    }

    /// Placeholder 2T2R curve: the 1T1R curve scaled down by 100.
    pub fn default_2t2r() -> Self {
        Self {
            points: DEFAULT_1T1R.iter().map(|&(c, p)| (c, p / 100.0)).collect(),
        }
    }

    pub fn default_for(mode: CellMode) -> Self {
        match mode {
            CellMode::T1R1 => Self::default_1t1r(),
            CellMode::T2R2 => Self::default_2t2r(),
        }
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn range(&self) -> (u64, u64) {
        (self.points[0].0, self.points[self.points.len() - 1].0)
    }

    pub fn at(&self, cycles: u64) -> Result<f64> {
        let (min, max) = self.range();
        if cycles < min || cycles > max {
            return Err(Error::Range { cycles, min, max });
        }
        let k = self.points.partition_point(|&(c, _)| c <= cycles);
        if k == 0 || self.points[k - 1].0 == cycles || k == self.points.len() {
            return Ok(self.points[k.saturating_sub(1)].1);
        }
        let (c0, p0) = self.points[k - 1];
        let (c1, p1) = self.points[k];
        if p0 == p1 {
            return Ok(p0);
        }
        let lg = |c: u64| (c.max(1) as f64).log10();
        let t = (lg(cycles) - lg(c0)) / (lg(c1) - lg(c0));
        Ok(p0 + t * (p1 - p0))
    }

    /// Two-column text: `cycles probability` per line, `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            if cols.len() != 2 {
                return Err(err(format!("expected 2 columns, found {}", cols.len())));
            }
            let cycles = cols[0]
                .parse::<f64>()
                .ok()
                .filter(|c| *c >= 0.0 && c.fract() == 0.0 && *c <= u64::MAX as f64)
                .ok_or_else(|| err(format!("bad cycle count '{}'", cols[0])))? as u64;
            let p = cols[1]
                .parse::<f64>()
                .map_err(|_| err(format!("bad probability '{}'", cols[1])))?;
            points.push((cycles, p));
        }
        Self::new(points)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# cycles probability\n");
        for (c, p) in &self.points {
            s.push_str(&format!("{c} {p:e}\n"));
        }
        s
    }
}

const DEFAULT_1T1R: [(u64, f64); 8] = [
    (1, 1.0e-2),
    (10, 1.0e-2),
    (100, 1.1e-2),
    (1_000, 1.2e-2),
    (10_000, 1.5e-2),
    (100_000, 2.0e-2),
    (1_000_000, 3.0e-2),
    (10_000_000, 5.0e-2),
];

/// When corrupted weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTiming {
    /// Once per programming event; every inference sees the same weights.
    #[default]
    Program,
    /// Fresh errors on every inference.
    Read,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultModel {
    pub mode: CellMode,
    pub curve: BerCurve,
    pub seed: u64,
    pub timing: FaultTiming,
}

impl FaultModel {
    pub fn new(mode: CellMode, curve: BerCurve, seed: u64) -> Self {
        Self {
            mode,
            curve,
            seed,
            timing: FaultTiming::Program,
        }
    }

    pub fn with_default_curve(mode: CellMode, seed: u64) -> Self {
        Self::new(mode, BerCurve::default_for(mode), seed)
    }

    pub fn ber(&self, cycles: u64) -> Result<f64> {
        self.curve.at(cycles)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Flip every bit independently with probability `p`, drawing one uniform per
/// bit in index order. Returns the corrupted copy and the flip count.
fn flip_bits(w: &BitTensor, p: impl Fn(usize) -> f64, rng: &mut ChaCha8Rng) -> (BitTensor, usize) {
    let mut out = w.clone();
    let mut flips = 0;
    for i in 0..w.len() {
        if rng.random::<f64>() < p(i) {
            out.flip(i);
            flips += 1;
        }
    }
    (out, flips)
}

/// Corrupt a weight tensor at the error rate the curve gives for `cycles`.
pub fn inject_faults(weights: &BitTensor, fm: &FaultModel, cycles: u64) -> Result<BitTensor> {
    Ok(inject_counted(weights, fm, cycles, 0)?.0)
}

/// Like [`inject_faults`] on random stream `stream`, also returning the flip count.
pub fn inject_counted(weights: &BitTensor, fm: &FaultModel, cycles: u64, stream: u64) -> Result<(BitTensor, usize)> {
    let p = fm.ber(cycles)?;
    let mut rng = stream_rng(fm.seed, stream);
    Ok(flip_bits(weights, |_| p, &mut rng))
}

/// Cells mirroring one layer's weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SynapseArray {
    shape: Vec<usize>,
    mode: CellMode,
    cells: Vec<SynapseCell>,
}

impl SynapseArray {
    pub fn new(shape: Vec<usize>, mode: CellMode) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            mode,
            cells: vec![SynapseCell::new(mode); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn mode(&self) -> CellMode {
        self.mode
    }

    pub fn cells(&self) -> &[SynapseCell] {
        &self.cells
    }

    pub fn program(&mut self, weights: &BitTensor) -> Result<()> {
        if weights.shape() != self.shape.as_slice() {
            return Err(Error::shape(format!(
                "weights {:?} do not fit array {:?}",
                weights.shape(),
                self.shape
            )));
        }
        for (i, c) in self.cells.iter_mut().enumerate() {
            c.program(weights.get(i));
        }
        Ok(())
    }

    /// Advance every device by `n` programming cycles without changing data.
    pub fn cycle(&mut self, n: u64) {
        for c in &mut self.cells {
            c.age(n);
        }
    }

    /// Read every cell. Without a fault model the read is exact; with one, each
    /// cell flips at the rate its own cycle count gives.
    pub fn read_all(&self, fm: Option<&FaultModel>) -> Result<BitTensor> {
        let bools: Vec<bool> = self.cells.iter().map(|c| c.stored_weight() > 0).collect();
        let clean = BitTensor::from_bools(self.shape.clone(), &bools)?;
        let Some(fm) = fm else { return Ok(clean) };
        if fm.mode != self.mode {
            return Err(Error::Mode(format!("{} fault model on a {} array", fm.mode, self.mode)));
        }
        let probs = self
            .cells
            .iter()
            .map(|c| fm.ber(c.cycles()))
            .collect::<Result<Vec<f64>>>()?;
        let mut rng = stream_rng(fm.seed, 0);
        Ok(flip_bits(&clean, |i| probs[i], &mut rng).0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFlips {
    pub layer: usize,
    pub bits: usize,
    pub flips: usize,
}

/// Per-layer flip counts from one faulty run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlipReport {
    pub mode: CellMode,
    pub cycles: u64,
    pub ber: f64,
    pub timing: FaultTiming,
    pub layers: Vec<LayerFlips>,
    pub total_flips: usize,
}

impl FlipReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("flip report serializes")
    }
}

/// Copy of `model` with every binary layer's weights corrupted; layer `i`
/// draws from stream `stream_base + i`.
pub fn corrupt_model(model: &Model, fm: &FaultModel, cycles: u64, stream_base: u64) -> Result<(Model, Vec<LayerFlips>)> {
    let mut m = model.clone();
    let mut report = Vec::new();
    for (i, p) in m.layers.iter_mut().enumerate() {
        if let Some(w) = p.binary_weights_mut() {
            let (bad, flips) = inject_counted(w, fm, cycles, stream_base + i as u64)?;
            report.push(LayerFlips {
                layer: i,
                bits: w.len(),
                flips,
            });
            *w = bad;
        }
    }
    Ok((m, report))
}

/// Forward every input through fault-injected binary weights; real layers are
/// untouched.
pub fn faulty_inference(model: &Model, fm: &FaultModel, cycles: u64, inputs: &[RealTensor]) -> Result<(Vec<Vec<f32>>, FlipReport)> {
    let ber = fm.ber(cycles)?;
    let (outputs, layers) = match fm.timing {
        FaultTiming::Program => {
            let (bad, layers) = corrupt_model(model, fm, cycles, 0)?;
            let outs = inputs.par_iter().map(|x| bad.forward(x)).collect::<Result<Vec<_>>>()?;
            (outs, layers)
        }
        FaultTiming::Read => {
            let n_layers = model.layers.len() as u64;
            let runs = inputs
                .par_iter()
                .enumerate()
                .map(|(j, x)| {
                    let (bad, flips) = corrupt_model(model, fm, cycles, (j as u64 + 1) * n_layers)?;
                    Ok((bad.forward(x)?, flips))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut layers: Vec<LayerFlips> = Vec::new();
            let mut outs = Vec::with_capacity(runs.len());
            for (o, flips) in runs {
                outs.push(o);
                if layers.is_empty() {
                    layers = flips;
                } else {
                    for (acc, f) in layers.iter_mut().zip(flips) {
                        acc.flips += f.flips;
                    }
                }
            }
            (outs, layers)
        }
    };
    let total_flips = layers.iter().map(|l| l.flips).sum();
    Ok((
        outputs,
        FlipReport {
            mode: fm.mode,
            cycles,
            ber,
            timing: fm.timing,
            layers,
            total_flips,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: CellMode,
    pub cycles: u64,
    pub ber: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_flips: f64,
}

pub struct SweepConfig<'a> {
    /// Curve per mode; `None` selects the default placeholder curve.
    pub curves: Vec<(CellMode, Option<&'a BerCurve>)>,
    pub cycles: Vec<u64>,
    pub repetitions: usize,
    pub seed: u64,
    pub timing: FaultTiming,
}

/// Accuracy under injected faults for every (mode, cycle count), averaged over
/// seeded repetitions. Repetition `r` uses seed `seed + r` for both modes, so
/// results do not depend on how work is scheduled.
pub fn fault_sweep(model: &Model, inputs: &[RealTensor], labels: &[usize], cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::InvalidValue("need matching, non-empty inputs and labels".into()));
    }
    if cfg.repetitions == 0 {
        return Err(Error::InvalidValue("repetitions must be >= 1".into()));
    }
    let mut rows = Vec::new();
    for &(mode, curve) in &cfg.curves {
        let curve = curve.cloned().unwrap_or_else(|| BerCurve::default_for(mode));
        for &cycles in &cfg.cycles {
            let ber = curve.at(cycles)?;
            let runs = (0..cfg.repetitions)
                .into_par_iter()
                .map(|r| {
                    let mut fm = FaultModel::new(mode, curve.clone(), cfg.seed.wrapping_add(r as u64));
                    fm.timing = cfg.timing;
                    let (outs, report) = faulty_inference(model, &fm, cycles, inputs)?;
                    let correct = outs.iter().zip(labels).filter(|(o, &l)| argmax(o) == l).count();
                    Ok((correct as f64 / labels.len() as f64, report.total_flips as f64))
                })
                .collect::<Result<Vec<_>>>()?;
            let accs: Vec<f64> = runs.iter().map(|r| r.0).collect();
            let (mean, std) = mean_std(&accs);
            rows.push(SweepRow {
                mode,
                cycles,
                ber,
                mean_accuracy: mean,
                std_accuracy: std,
                mean_flips: runs.iter().map(|r| r.1).sum::<f64>() / runs.len() as f64,
            });
        }
    }
    Ok(rows)
}

/// Mean and (population) standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
