//! Bit-field decomposition of BF16 tensors.
//!
//! A BF16 word is `sign(1) | exponent(8) | mantissa(7)` from the most
//! significant bit down. The sign and mantissa of each element are packed
//! into one byte, `(sign << 7) | mantissa`, and the exponent becomes its own
//! byte. Special values (NaN, Inf, subnormals) are opaque bit patterns here.

use crate::error::{Error, Result};

/// A tensor of raw BF16 words.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bf16Buffer {
    words: Vec<u16>,
}

impl Bf16Buffer {
    pub fn new(words: Vec<u16>) -> Self {
        Self { words }
    }

    /// Parses little-endian BF16 bytes. The byte length must be even.
    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 2 != 0 {
            return Err(Error::invalid(format!("BF16 byte stream has odd length {}", bytes.len())));
        }
        let words = bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        Ok(Self { words })
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn words(&self) -> &[u16] {
        &self.words
    }

    pub fn into_words(self) -> Vec<u16> {
        self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        2 * self.words.len()
    }
}

impl From<Vec<u16>> for Bf16Buffer {
    fn from(words: Vec<u16>) -> Self {
        Self::new(words)
    }
}

/// Sign+mantissa bytes, one per element. Stored raw, never compressed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SmChunk {
    bytes: Vec<u8>,
}

impl SmChunk {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// One contiguous slice of a tensor's exponent byte stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EShard {
    pub shard_index: usize,
    pub bytes: Vec<u8>,
}

#[inline]
fn split_word(w: u16) -> (u8, u8) {
    let sm = (((w >> 8) & 0x80) | (w & 0x7F)) as u8;
    let exp = ((w >> 7) & 0xFF) as u8;
    (sm, exp)
}

#[inline]
pub(crate) fn join_word(sm: u8, exp: u8) -> u16 {
    ((sm as u16 & 0x80) << 8) | ((exp as u16) << 7) | (sm as u16 & 0x7F)
}

/// Byte ranges of a balanced contiguous split of `len` bytes into `k` parts.
/// The first `len % k` parts get one extra byte.
pub fn shard_ranges(len: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    let base = len / k;
    let extra = len % k;
    let mut start = 0;
    (0..k)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// Splits a tensor into its SM-chunk and `k` balanced exponent shards.
pub fn decompose(tensor: &Bf16Buffer, k: usize) -> Result<(SmChunk, Vec<EShard>)> {
    let n = tensor.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("shard count {k} must be in 1..={n} for a {n}-element tensor")));
    }
    let mut sm = Vec::with_capacity(n);
    let mut exp = Vec::with_capacity(n);
    for &w in tensor.words() {
        let (s, e) = split_word(w);
        sm.push(s);
        exp.push(e);
    }
    let shards = shard_ranges(n, k)
        .into_iter()
        .enumerate()
        .map(|(shard_index, r)| EShard { shard_index, bytes: exp[r].to_vec() })
        .collect();
    Ok((SmChunk { bytes: sm }, shards))
}

/// Reassembles BF16 words from an SM-chunk and the full exponent stream.
pub fn recompose(sm: &SmChunk, exponent_bytes: &[u8]) -> Result<Bf16Buffer> {
    if sm.len() != exponent_bytes.len() {
        return Err(Error::invalid(format!(
            "SM-chunk has {} elements but exponent stream has {}",
            sm.len(),
            exponent_bytes.len()
        )));
    }
    let words = sm.bytes().iter().zip(exponent_bytes).map(|(&s, &e)| join_word(s, e)).collect();
    Ok(Bf16Buffer { words })
}

/// Exponent bytes of a tensor, unsharded.
pub fn exponent_stream(tensor: &Bf16Buffer) -> Vec<u8> {
    tensor.words().iter().map(|&w| split_word(w).1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_decomposes_to_zero_sign_and_bias_exponent() {
        let (sm, shards) = decompose(&Bf16Buffer::new(vec![0x3F80]), 1).unwrap();
        assert_eq!(sm.bytes(), &[0x00]);
        assert_eq!(shards[0].bytes, vec![0x7F]);
    }

    #[test]
    fn minus_two_point_five() {
        let (sm, shards) = decompose(&Bf16Buffer::new(vec![0xC020]), 1).unwrap();
        assert_eq!(sm.bytes(), &[0xA0]);
        assert_eq!(shards[0].bytes, vec![0x80]);

        let back = recompose(&SmChunk::from_bytes(vec![0xA0]), &[0x80]).unwrap();
        assert_eq!(back.words(), &[0xC020]);
        let one = recompose(&SmChunk::from_bytes(vec![0x00]), &[0x7F]).unwrap();
        assert_eq!(one.words(), &[0x3F80]);
    }

    #[test]
    fn four_elements_four_shards() {
        let t = Bf16Buffer::new(vec![0x3F80, 0x4000, 0x4040, 0x4080]);
        let (_, shards) = decompose(&t, 4).unwrap();
        assert_eq!(shards.len(), 4);
        assert!(shards.iter().all(|s| s.bytes.len() == 1));
        assert_eq!(shards.iter().map(|s| s.shard_index).collect::<Vec<_>>(), [0, 1, 2, 3]);
    }

    #[test]
    fn bad_shard_counts() {
        let t = Bf16Buffer::new(vec![1, 2, 3]);
        assert!(matches!(decompose(&t, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(decompose(&t, 4), Err(Error::InvalidArgument(_))));
        assert!(matches!(recompose(&SmChunk::from_bytes(vec![0, 0]), &[1]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn odd_byte_stream_rejected() {
        assert!(Bf16Buffer::from_le_bytes(&[1, 2, 3]).is_err());
        let b = Bf16Buffer::from_le_bytes(&[0x80, 0x3F]).unwrap();
        assert_eq!(b.words(), &[0x3F80]);
        assert_eq!(b.to_le_bytes(), vec![0x80, 0x3F]);
    }

    #[test]
    fn random_roundtrip_4096() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = Bf16Buffer::new((0..4096).map(|_| rng.gen()).collect());
        let (sm, shards) = decompose(&t, 8).unwrap();
        let exp: Vec<u8> = shards.into_iter().flat_map(|s| s.bytes).collect();
        assert_eq!(recompose(&sm, &exp).unwrap(), t);
    }

    proptest! {
        #[test]
        fn shards_partition_exponents(words in proptest::collection::vec(any::<u16>(), 1..300), k_seed in any::<usize>()) {
            let t = Bf16Buffer::new(words);
            let k = 1 + k_seed % t.len();
            let (sm, shards) = decompose(&t, k).unwrap();
            let sizes: Vec<usize> = shards.iter().map(|s| s.bytes.len()).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            let exp: Vec<u8> = shards.into_iter().flat_map(|s| s.bytes).collect();
            prop_assert_eq!(sm.len(), exp.len());
            prop_assert_eq!(&exp, &exponent_stream(&t));
            prop_assert_eq!(recompose(&sm, &exp).unwrap(), t);
        }
    }
}
