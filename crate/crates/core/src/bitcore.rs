//! Packed ±1 tensors and the word-level XNOR/popcount primitives.
//!
//! Element `i` of a [`BitTensor`] lives at bit `i % 64` of word `i / 64`
//! (little-endian bit numbering). A set bit encodes +1, a clear bit −1.
//! Bits past `len` in the final word are always zero, so two tensors with the
//! same logical contents compare equal word for word.

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of a `len`-bit tensor.
#[inline]
fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Row-major tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct RealTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl RealTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if element_count(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                element_count(&shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite entry {} at index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = element_count(&shape);
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if element_count(&shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Shape-carrying tensor of ±1 values packed 64 per word.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
    len: usize,
}

impl BitTensor {
    /// All elements −1.
    pub fn minus_ones(shape: Vec<usize>) -> Self {
        let len = element_count(&shape);
        Self {
            shape,
            words: vec![0; words_for(len)],
            len,
        }
    }

    pub fn from_bools(shape: Vec<usize>, bits: &[bool]) -> Result<Self> {
        let mut t = Self::minus_ones(shape);
        if bits.len() != t.len {
            return Err(Error::shape(format!(
                "shape {:?} holds {} elements, got {}",
                t.shape,
                t.len,
                bits.len()
            )));
        }
        for (i, &b) in bits.iter().enumerate() {
            if b {
                t.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
        }
        Ok(t)
    }

    /// Build from ±1 values; any non-negative value is read as +1.
    pub fn from_signs(shape: Vec<usize>, signs: &[i8]) -> Result<Self> {
        let bits: Vec<bool> = signs.iter().map(|&s| s >= 0).collect();
        Self::from_bools(shape, &bits)
    }

    /// Adopt raw words, clearing anything past `len`.
    pub fn from_raw_words(shape: Vec<usize>, mut words: Vec<u64>) -> Result<Self> {
        let len = element_count(&shape);
        if words.len() != words_for(len) {
            return Err(Error::shape(format!(
                "{} elements need {} words, got {}",
                len,
                words_for(len),
                words.len()
            )));
        }
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(len);
        }
        Ok(Self { shape, words, len })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn sign(&self, i: usize) -> i8 {
        if self.get(i) {
            1
        } else {
            -1
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, plus_one: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let mask = 1u64 << (i % WORD_BITS);
        if plus_one {
            self.words[i / WORD_BITS] |= mask;
        } else {
            self.words[i / WORD_BITS] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.words[i / WORD_BITS] ^= 1u64 << (i % WORD_BITS);
    }

    /// Elementwise negation.
    pub fn not(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(self.len);
        }
        Self {
            shape: self.shape.clone(),
            words,
            len: self.len,
        }
    }

    /// Number of +1 elements.
    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Number of positions where `self` and `other` differ.
    pub fn hamming(&self, other: &Self) -> Result<u64> {
        check_same_shape(self, other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as u64)
            .sum())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if element_count(&shape) != self.len {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

fn check_same_shape(a: &BitTensor, b: &BitTensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "operand shapes differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Binarize with `x >= 0 → +1`, `x < 0 → −1`.
pub fn pack(t: &RealTensor) -> Result<BitTensor> {
    pack_slice(t.shape().to_vec(), t.data())
}

pub(crate) fn pack_slice(shape: Vec<usize>, data: &[f32]) -> Result<BitTensor> {
    let mut out = BitTensor::minus_ones(shape);
    if out.len != data.len() {
        return Err(Error::shape("data length does not match shape"));
    }
    for (wi, chunk) in data.chunks(WORD_BITS).enumerate() {
        let mut word = 0u64;
        for (bi, &v) in chunk.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "non-finite entry {v} at index {}",
                    wi * WORD_BITS + bi
                )));
            }
            word |= ((v >= 0.0) as u64) << bi;
        }
        out.words[wi] = word;
    }
    Ok(out)
}

pub fn unpack(b: &BitTensor) -> RealTensor {
    let data = (0..b.len)
        .map(|i| if b.get(i) { 1.0 } else { -1.0 })
        .collect();
    RealTensor {
        shape: b.shape.clone(),
        data,
    }
}

/// Count of positions where `a` and `b` agree.
pub fn xnor_popcount(a: &BitTensor, b: &BitTensor) -> Result<u64> {
    check_same_shape(a, b)?;
    Ok(xnor_popcount_words(&a.words, &b.words, a.len))
}

/// ±1 dot product, `2·agreements − n`.
pub fn binary_dot(a: &BitTensor, b: &BitTensor) -> Result<i64> {
    let agree = xnor_popcount(a, b)? as i64;
    Ok(2 * agree - a.len as i64)
}

fn xnor_popcount_words(a: &[u64], b: &[u64], len: usize) -> u64 {
    let full = len / WORD_BITS;
    let mut agree: u64 = a[..full]
        .iter()
        .zip(&b[..full])
        .map(|(x, y)| (!(x ^ y)).count_ones() as u64)
        .sum();
    if len % WORD_BITS != 0 {
        agree += ((!(a[full] ^ b[full])) & tail_mask(len)).count_ones() as u64;
    }
    agree
}

/// 64 bits of `words` starting at bit `offset`; bits past the end read as 0.
#[inline]
fn load_bits(words: &[u64], offset: usize) -> u64 {
    let wi = offset / WORD_BITS;
    let sh = offset % WORD_BITS;
    let lo = words.get(wi).copied().unwrap_or(0);
    if sh == 0 {
        lo
    } else {
        let hi = words.get(wi + 1).copied().unwrap_or(0);
        (lo >> sh) | (hi << (WORD_BITS - sh))
    }
}

/// Agreements between `len` bits of `a` starting at `a_off` and `len` bits of
/// `b` starting at `b_off`. Neither span needs to be word aligned.
#[inline]
pub(crate) fn xnor_popcount_span(a: &[u64], a_off: usize, b: &[u64], b_off: usize, len: usize) -> u32 {
    let mut agree = 0u32;
    let mut done = 0;
    while done + WORD_BITS <= len {
        let x = load_bits(a, a_off + done);
        let y = load_bits(b, b_off + done);
        agree += (!(x ^ y)).count_ones();
        done += WORD_BITS;
    }
    let rest = len - done;
    if rest > 0 {
        let x = load_bits(a, a_off + done);
        let y = load_bits(b, b_off + done);
        agree += ((!(x ^ y)) & ((1u64 << rest) - 1)).count_ones();
    }
    agree
}

/// ±1 dot product over bit spans; see [`xnor_popcount_span`].
#[inline]
pub(crate) fn dot_span(a: &[u64], a_off: usize, b: &[u64], b_off: usize, len: usize) -> i32 {
    2 * xnor_popcount_span(a, a_off, b, b_off, len) as i32 - len as i32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bits(rng: &mut ChaCha8Rng, n: usize) -> BitTensor {
        let bits: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        BitTensor::from_bools(vec![n], &bits).unwrap()
    }

    #[test]
    fn pack_sign_convention() {
        let t = RealTensor::from_vec(vec![0.5, -0.2, 0.0, -3.0]).unwrap();
        let b = pack(&t).unwrap();
        assert_eq!(
            (0..4).map(|i| b.get(i)).collect::<Vec<_>>(),
            vec![true, false, true, false]
        );
    }

    #[test]
    fn pack_keeps_pad_bits_clear() {
        let t = RealTensor::from_vec(vec![1.0; 70]).unwrap();
        let b = pack(&t).unwrap();
        assert_eq!(b.words().len(), 2);
        assert_eq!(b.words()[1], (1 << 6) - 1);
        assert_eq!(b.not().words()[1], 0);
    }

    #[test]
    fn pack_rejects_non_finite() {
        let t = RealTensor {
            shape: vec![2],
            data: vec![1.0, f32::NAN],
        };
        assert!(matches!(pack(&t), Err(Error::InvalidValue(_))));
        assert!(RealTensor::from_vec(vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn unpack_basics() {
        let b = BitTensor::from_bools(vec![2], &[true, false]).unwrap();
        assert_eq!(unpack(&b).data(), &[1.0, -1.0]);
        let empty = BitTensor::minus_ones(vec![0]);
        assert!(unpack(&empty).is_empty());
        assert_eq!(pack(&unpack(&empty)).unwrap(), empty);
    }

    #[test]
    fn unpack_pack_is_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..1000).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = RealTensor::from_vec(data.clone()).unwrap();
        let back = unpack(&pack(&t).unwrap());
        for (x, y) in data.iter().zip(back.data()) {
            assert_eq!(*y, if *x >= 0.0 { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn popcount_identity_and_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_bits(&mut rng, 64);
        assert_eq!(xnor_popcount(&a, &a).unwrap(), 64);
        assert_eq!(xnor_popcount(&a, &a.not()).unwrap(), 0);
    }

    #[test]
    fn popcount_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_bits(&mut rng, 1000);
        let b = random_bits(&mut rng, 1000);
        let naive = (0..1000).filter(|&i| a.get(i) == b.get(i)).count() as u64;
        assert_eq!(xnor_popcount(&a, &b).unwrap(), naive);
    }

    #[test]
    fn dot_examples() {
        let ones = BitTensor::from_bools(vec![10], &[true; 10]).unwrap();
        assert_eq!(binary_dot(&ones, &ones).unwrap(), 10);
        let half: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let half = BitTensor::from_bools(vec![10], &half).unwrap();
        assert_eq!(binary_dot(&ones, &half).unwrap(), 0);
    }

    #[test]
    fn dot_matches_float_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_bits(&mut rng, 257);
        let b = random_bits(&mut rng, 257);
        let fa = unpack(&a);
        let fb = unpack(&b);
        let float: f32 = fa.data().iter().zip(fb.data()).map(|(x, y)| x * y).sum();
        assert_eq!(binary_dot(&a, &b).unwrap(), float as i64);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = BitTensor::minus_ones(vec![4]);
        let b = BitTensor::minus_ones(vec![2, 2]);
        assert!(matches!(xnor_popcount(&a, &b), Err(Error::Shape { .. })));
        assert!(binary_dot(&a, &b).is_err());
    }

    #[test]
    fn span_popcount_unaligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_bits(&mut rng, 300);
        let b = random_bits(&mut rng, 300);
        for (ao, bo, len) in [(0, 0, 300), (3, 70, 150), (63, 1, 129), (100, 200, 0), (5, 9, 64)] {
            let naive = (0..len).filter(|&i| a.get(ao + i) == b.get(bo + i)).count() as u32;
            assert_eq!(xnor_popcount_span(a.words(), ao, b.words(), bo, len), naive);
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(bits in proptest::collection::vec(any::<bool>(), 0..600)) {
            let b = BitTensor::from_bools(vec![bits.len()], &bits).unwrap();
            prop_assert_eq!(pack(&unpack(&b)).unwrap(), b);
        }

        #[test]
        fn dot_is_symmetric_and_exact(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..400)) {
            let (xa, xb): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let n = xa.len();
            let a = BitTensor::from_bools(vec![n], &xa).unwrap();
            let b = BitTensor::from_bools(vec![n], &xb).unwrap();
            let naive: i64 = xa.iter().zip(&xb).map(|(p, q)| if p == q { 1 } else { -1 }).sum();
            prop_assert_eq!(binary_dot(&a, &b).unwrap(), naive);
            prop_assert_eq!(xnor_popcount(&a, &b).unwrap(), xnor_popcount(&b, &a).unwrap());
            prop_assert_eq!(xnor_popcount(&a, &a).unwrap(), n as u64);
        }

        #[test]
        fn garbage_pad_bits_are_masked(bits in proptest::collection::vec(any::<bool>(), 1..200), junk in any::<u64>()) {
            let n = bits.len();
            let clean = BitTensor::from_bools(vec![n], &bits).unwrap();
            let mut words = clean.words().to_vec();
            if n % WORD_BITS != 0 {
                *words.last_mut().unwrap() |= junk & !tail_mask(n);
            }
            let dirty = BitTensor::from_raw_words(vec![n], words).unwrap();
            prop_assert_eq!(&dirty, &clean);
            prop_assert_eq!(binary_dot(&dirty, &clean).unwrap(), n as i64);
        }
    }
}
