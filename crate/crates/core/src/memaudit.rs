//! Parameter-memory accounting for uniform, quantized and partially binarized
//! precision policies.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::netspec::{Group, LayerKind, NetworkSpec};

/// Bit widths for the two halves of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrecisionPolicy {
    pub name: String,
    pub feature_extractor_bits: u32,
    pub classifier_bits: u32,
}

impl PrecisionPolicy {
    pub fn new(name: impl Into<String>, feature_extractor_bits: u32, classifier_bits: u32) -> Result<Self> {
        for b in [feature_extractor_bits, classifier_bits] {
            if ![32, 8, 1].contains(&b) {
                return Err(Error::InvalidValue(format!("bit width {b} not in {{32, 8, 1}}")));
            }
        }
        Ok(Self {
            name: name.into(),
            feature_extractor_bits,
            classifier_bits,
        })
    }

    pub fn fp32() -> Self {
        Self::new("fp32", 32, 32).unwrap()
    }

    pub fn int8() -> Self {
        Self::new("int8", 8, 8).unwrap()
    }

    /// 32-bit feature extractor, binary classifier.
    pub fn binclf() -> Self {
        Self::new("binclf", 32, 1).unwrap()
    }

    /// 8-bit feature extractor, binary classifier.
    pub fn binclf_int8() -> Self {
        Self::new("binclf-int8", 8, 1).unwrap()
    }

    pub fn binary() -> Self {
        Self::new("binary", 1, 1).unwrap()
    }

    pub fn standard() -> Vec<Self> {
        vec![Self::fp32(), Self::int8(), Self::binclf(), Self::binclf_int8(), Self::binary()]
    }

    pub fn bits_for(&self, group: Group) -> u32 {
        match group {
            Group::FeatureExtractor => self.feature_extractor_bits,
            Group::Classifier => self.classifier_bits,
        }
    }
}

impl FromStr for PrecisionPolicy {
    type Err = Error;

    /// A standard name, or `custom:<fe_bits>:<clf_bits>`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = Self::standard().into_iter().find(|p| p.name == s) {
            return Ok(p);
        }
        if let Some(rest) = s.strip_prefix("custom:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if let [a, b] = parts.as_slice() {
                let parse = |v: &str| v.parse::<u32>().map_err(|_| Error::InvalidValue(format!("bad bit width '{v}'")));
                return Self::new(s, parse(a)?, parse(b)?);
            }
        }
        Err(Error::InvalidValue(format!(
            "unknown policy '{s}' (expected fp32, int8, binclf, binclf-int8, binary or custom:<fe>:<clf>)"
        )))
    }
}

/// Bias and batch-norm parameters of binarized layers stay at this width.
pub const AUX_BITS_WHEN_BINARY: u32 = 32;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMemory {
    pub index: usize,
    pub kind: LayerKind,
    pub group: Group,
    pub weights: usize,
    pub aux: usize,
    pub weight_bits: u32,
    pub aux_bits: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub model: String,
    pub policy: PrecisionPolicy,
    pub layers: Vec<LayerMemory>,
    pub params: usize,
    pub feature_extractor_params: usize,
    pub classifier_params: usize,
    pub classifier_share: f64,
    pub bytes: u64,
    /// Binary-prefix megabytes (2^20 bytes).
    pub mib: f64,
    /// Decimal megabytes (10^6 bytes).
    pub mb: f64,
    /// Decimal kilobytes.
    pub kb: f64,
    pub baseline: String,
    pub baseline_fp32_bytes: u64,
    pub baseline_int8_bytes: u64,
    /// Percent saved against the uniform 32-bit baseline.
    pub savings_vs_fp32: f64,
    /// Percent saved against the uniform 8-bit baseline.
    pub savings_vs_int8: f64,
}

fn bytes_for(bits: u128) -> u64 {
    bits.div_ceil(8) as u64
}

struct Tally {
    layers: Vec<LayerMemory>,
    bytes: u64,
    bits: u128,
}

fn tally(spec: &NetworkSpec, policy: &PrecisionPolicy) -> Result<Tally> {
    let counts = spec.count_params()?;
    let mut layers = Vec::new();
    let (mut bytes, mut bits) = (0u64, 0u128);
    for l in counts.layers.iter().filter(|l| l.weights + l.aux > 0) {
        let wb = policy.bits_for(l.group);
        let ab = if wb == 1 { AUX_BITS_WHEN_BINARY } else { wb };
        let layer_bits = l.weights as u128 * wb as u128 + l.aux as u128 * ab as u128;
        let b = bytes_for(layer_bits);
        bytes += b;
        bits += layer_bits;
        layers.push(LayerMemory {
            index: l.index,
            kind: l.kind,
            group: l.group,
            weights: l.weights,
            aux: l.aux,
            weight_bits: wb,
            aux_bits: ab,
            bytes: b,
        });
    }
    Ok(Tally { layers, bytes, bits })
}

/// Total parameter bits of `spec` under `policy`.
pub fn total_bits(spec: &NetworkSpec, policy: &PrecisionPolicy) -> Result<u128> {
    Ok(tally(spec, policy)?.bits)
}

pub fn savings(size: u64, baseline: u64) -> f64 {
    if baseline == 0 {
        return 0.0;
    }
    (1.0 - size as f64 / baseline as f64) * 100.0
}

/// Audit against the spec's own uniform-precision baselines.
pub fn audit(spec: &NetworkSpec, policy: &PrecisionPolicy) -> Result<MemoryReport> {
    audit_with_baseline(spec, policy, spec)
}

/// Audit `spec`, measuring savings against `baseline` at uniform 32 and 8 bits.
pub fn audit_with_baseline(spec: &NetworkSpec, policy: &PrecisionPolicy, baseline: &NetworkSpec) -> Result<MemoryReport> {
    let t = tally(spec, policy)?;
    let counts = spec.count_params()?;
    let b32 = tally(baseline, &PrecisionPolicy::fp32())?.bytes;
    let b8 = tally(baseline, &PrecisionPolicy::int8())?.bytes;
    Ok(MemoryReport {
        model: spec.name.clone(),
        policy: policy.clone(),
        layers: t.layers,
        params: counts.total,
        feature_extractor_params: counts.feature_extractor,
        classifier_params: counts.classifier,
        classifier_share: if counts.total == 0 {
            0.0
        } else {
            counts.classifier as f64 / counts.total as f64
        },
        bytes: t.bytes,
        mib: t.bytes as f64 / (1u64 << 20) as f64,
        mb: t.bytes as f64 / 1e6,
        kb: t.bytes as f64 / 1e3,
        baseline: baseline.name.clone(),
        baseline_fp32_bytes: b32,
        baseline_int8_bytes: b8,
        savings_vs_fp32: savings(t.bytes, b32),
        savings_vs_int8: savings(t.bytes, b8),
    })
}

/// One report per policy, in the given order.
pub fn compare_policies(spec: &NetworkSpec, policies: &[PrecisionPolicy], baseline: Option<&NetworkSpec>) -> Result<Vec<MemoryReport>> {
    policies
        .iter()
        .map(|p| audit_with_baseline(spec, p, baseline.unwrap_or(spec)))
        .collect()
}

/// How the bit cost of an augmented all-binary network is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentCost {
    /// k × the bits of the un-augmented all-binary network.
    #[default]
    Linear,
    /// Bits of the actually augmented network (filter growth compounds
    /// between stacked convolutions).
    Exact,
}

/// Largest k such that the all-binary network with k× convolution filters
/// fits in the memory of `spec` under `reference`. Returns 0 when even the
/// plain all-binary network does not fit.
pub fn equal_memory_augmentation(spec: &NetworkSpec, reference: &PrecisionPolicy, cost: AugmentCost) -> Result<usize> {
    let budget = total_bits(spec, reference)?;
    let binary = PrecisionPolicy::binary();
    let base = total_bits(spec, &binary)?;
    if base == 0 {
        return Err(Error::InvalidValue("network has no parameters".into()));
    }
    match cost {
        AugmentCost::Linear => Ok((budget / base) as usize),
        AugmentCost::Exact => {
            let mut k = 0usize;
            loop {
                let next = k + 1;
                let bits = match spec.augment(next) {
                    Ok(s) => total_bits(&s, &binary)?,
                    Err(Error::Capacity(_)) => return Ok(k),
                    Err(e) => return Err(e),
                };
                if bits > budget {
                    return Ok(k);
                }
                k = next;
            }
        }
    }
}

/// Aligned plain-text table of several reports.
pub fn render_text(reports: &[MemoryReport]) -> String {
    let header = [
        "model", "policy", "params", "clf_params", "clf_share", "bytes", "MiB", "kB", "save_vs_32", "save_vs_8",
    ];
    let rows: Vec<Vec<String>> = reports.iter().map(row_cells).collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<String>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.iter().map(|s| s.to_string()).collect(), &mut out);
    for r in rows {
        line(r, &mut out);
    }
    out
}

/// Tab-separated table with a header row.
pub fn render_tsv(reports: &[MemoryReport]) -> String {
    let mut out =
        String::from("model\tpolicy\tparams\tclf_params\tclf_share\tbytes\tMiB\tkB\tsave_vs_32\tsave_vs_8\n");
    for r in reports {
        out.push_str(&row_cells(r).join("\t"));
        out.push('\n');
    }
    out
}

pub fn render_json(reports: &[MemoryReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

fn row_cells(r: &MemoryReport) -> Vec<String> {
    vec![
        r.model.clone(),
        r.policy.name.clone(),
        r.params.to_string(),
        r.classifier_params.to_string(),
        format!("{:.1}%", r.classifier_share * 100.0),
        r.bytes.to_string(),
        format!("{:.3}", r.mib),
        format!("{:.1}", r.kb),
        format!("{:.2}%", r.savings_vs_fp32),
        format!("{:.2}%", r.savings_vs_int8),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::builtin;

    #[test]
    fn eeg_sizes_and_savings() {
        let eeg = builtin("eeg_dose").unwrap();
        let fp = audit(&eeg, &PrecisionPolicy::fp32()).unwrap();
        assert_eq!(fp.bytes, 305_522 * 4);
        assert!((fp.mib - 1.17).abs() < 0.01);
        assert_eq!(fp.savings_vs_fp32, 0.0);
        let i8r = audit(&eeg, &PrecisionPolicy::int8()).unwrap();
        assert!((i8r.kb - 305.0).abs() < 1.0);
        assert_eq!(i8r.savings_vs_int8, 0.0);
        let b = audit(&eeg, &PrecisionPolicy::binclf()).unwrap();
        assert!((b.savings_vs_fp32 - 64.0).abs() <= 2.0, "{}", b.savings_vs_fp32);
        let b8 = audit(&eeg, &PrecisionPolicy::binclf_int8()).unwrap();
        assert!((b8.savings_vs_int8 - 57.8).abs() <= 2.0, "{}", b8.savings_vs_int8);
    }

    #[test]
    fn mobilenet_savings_against_original() {
        let base = builtin("mobilenet_v1_224").unwrap();
        let bin = builtin("mobilenet_v1_binclf").unwrap();
        let r = compare_policies(&bin, &[PrecisionPolicy::binclf(), PrecisionPolicy::binclf_int8()], Some(&base)).unwrap();
        assert!((r[0].savings_vs_fp32 - 20.0).abs() <= 2.0, "{}", r[0].savings_vs_fp32);
        assert!((r[1].savings_vs_int8 - 7.3).abs() <= 2.0, "{}", r[1].savings_vs_int8);
    }

    #[test]
    fn audit_is_monotone() {
        for name in ["eeg_dose", "ecg_custom", "desk_conv"] {
            let spec = builtin(name).unwrap();
            let bytes = |p: PrecisionPolicy| audit(&spec, &p).unwrap().bytes;
            let order = [bytes(PrecisionPolicy::fp32()), bytes(PrecisionPolicy::binclf()), bytes(PrecisionPolicy::binary())];
            assert!(order[0] > order[1] && order[1] > order[2]);
            assert!(bytes(PrecisionPolicy::int8()) > bytes(PrecisionPolicy::binclf_int8()));
        }
    }

    #[test]
    fn augmentation_factors() {
        let eeg = builtin("eeg_dose").unwrap();
        assert_eq!(equal_memory_augmentation(&eeg, &PrecisionPolicy::binclf(), AugmentCost::Linear).unwrap(), 11);
        assert_eq!(equal_memory_augmentation(&eeg, &PrecisionPolicy::binclf_int8(), AugmentCost::Linear).unwrap(), 3);
        let exact = equal_memory_augmentation(&eeg, &PrecisionPolicy::binclf(), AugmentCost::Exact).unwrap();
        assert!(exact >= 1 && exact < 11);
    }

    #[test]
    fn single_policy_matches_audit() {
        let spec = builtin("ecg_custom").unwrap();
        let p = PrecisionPolicy::binclf();
        assert_eq!(compare_policies(&spec, &[p.clone()], None).unwrap()[0], audit(&spec, &p).unwrap());
    }

    #[test]
    fn policy_names() {
        assert_eq!("binclf-int8".parse::<PrecisionPolicy>().unwrap(), PrecisionPolicy::binclf_int8());
        assert_eq!("custom:8:8".parse::<PrecisionPolicy>().unwrap().feature_extractor_bits, 8);
        assert!("custom:4:1".parse::<PrecisionPolicy>().is_err());
        assert!("int4".parse::<PrecisionPolicy>().is_err());
    }

    #[test]
    fn renderers_have_one_row_per_report() {
        let spec = builtin("eeg_dose").unwrap();
        let r = compare_policies(&spec, &PrecisionPolicy::standard(), None).unwrap();
        assert_eq!(render_text(&r).lines().count(), 6);
        assert_eq!(render_tsv(&r).lines().count(), 6);
        assert!(render_json(&r).contains("\"savings_vs_fp32\""));
    }
}
