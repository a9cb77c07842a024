//! Static order-0 rANS coder over bytes.
//!
//! Payload layout: a mode byte, then either nothing (empty input), the single
//! repeated symbol, or a frequency table followed by the rANS stream:
//!
//! ```text
//! mode=2 | m: u16 | m x (symbol: u8, freq: u16) | state: u32 | stream bytes
//! ```
//!
//! Frequencies are normalized to sum to `1 << SCALE_BITS`.

use crate::error::{Error, Result};

const SCALE_BITS: u32 = 15;
const SCALE: u32 = 1 << SCALE_BITS;
const RANS_L: u32 = 1 << 23;

const MODE_EMPTY: u8 = 0;
const MODE_SINGLE: u8 = 1;
const MODE_RANS: u8 = 2;
const MODE_RAW: u8 = 3;

fn codec_err(message: impl Into<String>) -> Error {
    Error::Codec { backend: super::Codec::Order0.id(), message: message.into() }
}

/// Scales a histogram so the present symbols sum to `SCALE`, each at least 1.
fn normalize(counts: &[u64; 256]) -> [u32; 256] {
    let total: u64 = counts.iter().sum();
    let mut freq = [0u32; 256];
    for (f, &c) in freq.iter_mut().zip(counts) {
        if c > 0 {
            *f = ((c as u128 * SCALE as u128) / total as u128).max(1) as u32;
        }
    }
    let mut sum: i64 = freq.iter().map(|&f| f as i64).sum();
    while sum != SCALE as i64 {
        // largest frequency absorbs the rounding error
        let (idx, _) =
            freq.iter().enumerate().max_by_key(|&(i, &f)| (f, std::cmp::Reverse(i))).expect("non-empty histogram");
        if sum < SCALE as i64 {
            freq[idx] += (SCALE as i64 - sum) as u32;
            sum = SCALE as i64;
        } else {
            let take = ((sum - SCALE as i64) as u32).min(freq[idx] - 1);
            freq[idx] -= take;
            sum -= take as i64;
        }
    }
    freq
}

pub(crate) fn compress(input: &[u8]) -> Vec<u8> {
    if input.is_empty() {
        return vec![MODE_EMPTY];
    }
    let mut counts = [0u64; 256];
    for &b in input {
        counts[b as usize] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present == 1 {
        return vec![MODE_SINGLE, input[0]];
    }

    let freq = normalize(&counts);
    let mut start = [0u32; 256];
    let mut acc = 0;
    for s in 0..256 {
        start[s] = acc;
        acc += freq[s];
    }

    let mut rev = Vec::with_capacity(input.len() / 2 + 16);
    let mut x = RANS_L;
    for &b in input.iter().rev() {
        let f = freq[b as usize];
        let x_max = ((RANS_L >> SCALE_BITS) << 8) * f;
        while x >= x_max {
            rev.push(x as u8);
            x >>= 8;
        }
        x = ((x / f) << SCALE_BITS) + (x % f) + start[b as usize];
    }

    let mut out = Vec::with_capacity(3 + 3 * present + 4 + rev.len());
    out.push(MODE_RANS);
    out.extend_from_slice(&(present as u16).to_le_bytes());
    for (s, &f) in freq.iter().enumerate() {
        if f > 0 {
            out.push(s as u8);
            out.extend_from_slice(&(f as u16).to_le_bytes());
        }
    }
    out.extend_from_slice(&x.to_le_bytes());
    out.extend(rev.iter().rev());
    if out.len() > input.len() {
        // near-uniform input: the table costs more than coding saves
        out.clear();
        out.push(MODE_RAW);
        out.extend_from_slice(input);
    }
    out
}

pub(crate) fn decompress(payload: &[u8], len: usize) -> Result<Vec<u8>> {
    let (&mode, rest) = payload.split_first().ok_or_else(|| codec_err("empty payload"))?;
    match mode {
        MODE_EMPTY => {
            if len != 0 {
                return Err(codec_err(format!("empty stream cannot yield {len} bytes")));
            }
            Ok(Vec::new())
        }
        MODE_SINGLE => {
            let &sym = rest.first().ok_or_else(|| codec_err("missing symbol"))?;
            Ok(vec![sym; len])
        }
        MODE_RANS => decode_rans(rest, len),
        MODE_RAW => {
            if rest.len() != len {
                return Err(codec_err(format!("raw block holds {} bytes, expected {len}", rest.len())));
            }
            Ok(rest.to_vec())
        }
        other => Err(codec_err(format!("unknown mode byte {other}"))),
    }
}

fn decode_rans(data: &[u8], len: usize) -> Result<Vec<u8>> {
    let m = u16::from_le_bytes(data.get(..2).ok_or_else(|| codec_err("truncated table"))?.try_into().unwrap()) as usize;
    let table_end = 2 + 3 * m;
    let table = data.get(2..table_end).ok_or_else(|| codec_err("truncated table"))?;
    let mut freq = [0u32; 256];
    let mut start = [0u32; 256];
    let mut lookup = vec![0u8; SCALE as usize];
    let mut acc = 0u32;
    for entry in table.chunks_exact(3) {
        let s = entry[0] as usize;
        let f = u16::from_le_bytes([entry[1], entry[2]]) as u32;
        if f == 0 || acc + f > SCALE {
            return Err(codec_err("malformed frequency table"));
        }
        freq[s] = f;
        start[s] = acc;
        lookup[acc as usize..(acc + f) as usize].fill(s as u8);
        acc += f;
    }
    if acc != SCALE {
        return Err(codec_err("frequency table does not sum to scale"));
    }

    let state = data.get(table_end..table_end + 4).ok_or_else(|| codec_err("truncated state"))?;
    let mut x = u32::from_le_bytes(state.try_into().unwrap());
    let mut stream = data[table_end + 4..].iter();
    let mask = SCALE - 1;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let slot = x & mask;
        let s = lookup[slot as usize];
        x = freq[s as usize] * (x >> SCALE_BITS) + slot - start[s as usize];
        while x < RANS_L {
            let &b = stream.next().ok_or_else(|| codec_err("stream ended early"))?;
            x = (x << 8) | b as u32;
        }
        out.push(s);
    }
    if x != RANS_L || stream.next().is_some() {
        return Err(codec_err("trailing state mismatch"));
    }
    Ok(out)
}
