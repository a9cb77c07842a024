//! Lossless BF16 compression: bit-field decomposition, per-shard exponent
//! coding and entropy analytics.

mod bitfield;
mod entropy;
mod order0;

pub use bitfield::{decompose, exponent_stream, recompose, shard_ranges, Bf16Buffer, EShard, SmChunk};
pub use entropy::{compression_report, measure_entropy, CompressionReport};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CRC32C (Castagnoli) used for every stored region.
pub fn checksum(bytes: &[u8]) -> u32 {
    crc32c::crc32c(bytes)
}

/// Registered lossless byte-stream backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    /// Identity transform.
    Store,
    /// Built-in order-0 rANS entropy coder.
    Order0,
    /// LZ4 block format.
    #[cfg(feature = "lz4")]
    Lz4,
}

impl Codec {
    pub const fn id(self) -> u8 {
        match self {
            Codec::Store => 0,
            Codec::Order0 => 1,
            #[cfg(feature = "lz4")]
            Codec::Lz4 => 2,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Codec::Store => "store",
            Codec::Order0 => "order0",
            #[cfg(feature = "lz4")]
            Codec::Lz4 => "lz4",
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::all().iter().copied().find(|c| c.id() == id).ok_or(Error::UnsupportedCodec(id))
    }

    /// Every backend compiled into this build.
    pub fn all() -> &'static [Codec] {
        &[
            Codec::Store,
            Codec::Order0,
            #[cfg(feature = "lz4")]
            Codec::Lz4,
        ]
    }

    pub fn compress(self, input: &[u8]) -> Result<Vec<u8>> {
        Ok(match self {
            Codec::Store => input.to_vec(),
            Codec::Order0 => order0::compress(input),
            #[cfg(feature = "lz4")]
            Codec::Lz4 => lz4_flex::block::compress(input),
        })
    }

    pub fn decompress(self, payload: &[u8], uncompressed_len: usize) -> Result<Vec<u8>> {
        match self {
            Codec::Store => Ok(payload.to_vec()),
            Codec::Order0 => order0::decompress(payload, uncompressed_len),
            #[cfg(feature = "lz4")]
            Codec::Lz4 => lz4_flex::block::decompress(payload, uncompressed_len)
                .map_err(|e| Error::Codec { backend: self.id(), message: e.to_string() }),
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Codec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::all().iter().copied().find(|c| c.name().eq_ignore_ascii_case(s)).ok_or_else(|| {
            let known: Vec<_> = Self::all().iter().map(|c| c.name()).collect();
            Error::invalid(format!("unknown codec {s:?} (known: {})", known.join(", ")))
        })
    }
}

/// A compressed exponent shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EChunk {
    pub codec_id: u8,
    pub uncompressed_len: u64,
    pub checksum: u32,
    pub payload: Vec<u8>,
}

pub fn compress_shard(shard: &EShard, codec: Codec) -> Result<EChunk> {
    if shard.bytes.is_empty() {
        return Err(Error::invalid("cannot compress an empty shard"));
    }
    let payload = codec.compress(&shard.bytes)?;
    Ok(EChunk {
        codec_id: codec.id(),
        uncompressed_len: shard.bytes.len() as u64,
        checksum: checksum(&shard.bytes),
        payload,
    })
}

/// Decodes a chunk and verifies its length and CRC. Pure, so distinct chunks
/// can be decoded from any number of threads.
pub fn decompress_chunk(chunk: &EChunk) -> Result<Vec<u8>> {
    let codec = Codec::from_id(chunk.codec_id)?;
    let len = usize::try_from(chunk.uncompressed_len)
        .map_err(|_| Error::Corruption("chunk length overflows usize".into()))?;
    let out = codec.decompress(&chunk.payload, len).map_err(|e| match e {
        Error::Codec { message, .. } => {
            Error::Corruption(format!("{} payload does not decode: {message}", codec.name()))
        }
        other => other,
    })?;
    if out.len() != len {
        return Err(Error::Corruption(format!("decoded {} bytes, expected {len}", out.len())));
    }
    let crc = checksum(&out);
    if crc != chunk.checksum {
        return Err(Error::Corruption(format!(
            "E-chunk CRC mismatch: stored {:08x}, computed {crc:08x}",
            chunk.checksum
        )));
    }
    Ok(out)
}
