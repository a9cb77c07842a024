//! On-disk container for compressed experts.
//!
//! Version 1 layout, little-endian throughout:
//!
//! ```text
//! magic "ZMOE" | version: u16 | num_experts: u32 | n: u16 | K: u16 | codec_id: u8
//! num_experts x { layer: u32, expert_id: u32,
//!                 n x { element_count: u64, sm_offset: u64,
//!                       K x e_chunk_offset: u64, K x e_chunk_length: u64,
//!                       sm_crc: u32 } }
//! header_crc: u32                      (CRC32C of every preceding byte)
//! data regions, in table order: SM bytes, then K E-chunk frames per tensor
//! ```
//!
//! An E-chunk frame is `codec_id: u8 | uncompressed_len: u64 | crc: u32 | payload`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{
    checksum, compress_shard, decompose, decompress_chunk, recompose, Bf16Buffer, Codec, EChunk, SmChunk,
};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ZMOE";
pub const VERSION: u16 = 1;

const FIXED_HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2 + 1;
/// Bytes of an E-chunk frame before its payload.
pub const FRAME_HEADER_LEN: usize = 1 + 8 + 4;

/// Addresses one tensor of one expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertKey {
    pub layer: u32,
    pub expert_id: u32,
    pub tensor_index: u16,
}

impl ExpertKey {
    pub fn new(layer: u32, expert_id: u32, tensor_index: u16) -> Self {
        Self { layer, expert_id, tensor_index }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub element_count: u64,
    pub sm_offset: u64,
    pub e_chunk_offsets: Vec<u64>,
    pub e_chunk_lengths: Vec<u64>,
    pub sm_crc: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub layer: u32,
    pub expert_id: u32,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub version: u16,
    pub tensors_per_expert: u16,
    pub k: u16,
    pub codec_id: u8,
    pub experts: Vec<ExpertEntry>,
}

impl ContainerHeader {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    fn record_len(k: usize) -> usize {
        8 + 8 + 16 * k + 4
    }

    /// Serialized header size including the trailing CRC.
    pub fn encoded_len(&self) -> usize {
        Self::table_len(self.experts.len(), self.tensors_per_expert as usize, self.k as usize)
    }

    fn table_len(num_experts: usize, n: usize, k: usize) -> usize {
        FIXED_HEADER_LEN + num_experts * (8 + n * Self::record_len(k)) + 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.experts.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.tensors_per_expert.to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.push(self.codec_id);
        for e in &self.experts {
            out.extend_from_slice(&e.layer.to_le_bytes());
            out.extend_from_slice(&e.expert_id.to_le_bytes());
            for t in &e.tensors {
                out.extend_from_slice(&t.element_count.to_le_bytes());
                out.extend_from_slice(&t.sm_offset.to_le_bytes());
                for o in &t.e_chunk_offsets {
                    out.extend_from_slice(&o.to_le_bytes());
                }
                for l in &t.e_chunk_lengths {
                    out.extend_from_slice(&l.to_le_bytes());
                }
                out.extend_from_slice(&t.sm_crc.to_le_bytes());
            }
        }
        let crc = checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a header from the start of `bytes`; trailing data is ignored.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let fixed =
            bytes.get(..FIXED_HEADER_LEN).ok_or_else(|| Error::Format("file shorter than the fixed header".into()))?;
        if &fixed[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:02x?}", &fixed[..4])));
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let num_experts = r.u32()? as usize;
        let n = r.u16()?;
        let k = r.u16()?;
        let codec_id = r.u8()?;
        let total = Self::table_len(num_experts, n as usize, k as usize);
        if bytes.len() < total {
            return Err(Error::Format(format!("header needs {total} bytes, file has {}", bytes.len())));
        }
        let stored = u32::from_le_bytes(bytes[total - 4..total].try_into().unwrap());
        if checksum(&bytes[..total - 4]) != stored {
            return Err(Error::Format("header CRC mismatch".into()));
        }
        let mut experts = Vec::with_capacity(num_experts);
        for _ in 0..num_experts {
            let layer = r.u32()?;
            let expert_id = r.u32()?;
            let mut tensors = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let element_count = r.u64()?;
                let sm_offset = r.u64()?;
                let e_chunk_offsets = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
                let e_chunk_lengths = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
                let sm_crc = r.u32()?;
                tensors.push(TensorRecord { element_count, sm_offset, e_chunk_offsets, e_chunk_lengths, sm_crc });
            }
            experts.push(ExpertEntry { layer, expert_id, tensors });
        }
        Ok(Self { version, tensors_per_expert: n, k, codec_id, experts })
    }

    /// Checks that every region lies past the header, inside the file, and
    /// that no two regions overlap.
    pub fn validate_regions(&self, file_len: u64) -> Result<()> {
        let mut regions = Vec::new();
        for e in &self.experts {
            for t in &e.tensors {
                regions.push((t.sm_offset, t.element_count));
                for (&o, &l) in t.e_chunk_offsets.iter().zip(&t.e_chunk_lengths) {
                    if l < FRAME_HEADER_LEN as u64 {
                        return Err(Error::Format(format!("E-chunk at {o} shorter than its frame header")));
                    }
                    regions.push((o, l));
                }
            }
        }
        regions.sort_unstable();
        let mut cursor = self.encoded_len() as u64;
        for (off, len) in regions {
            let end = off.checked_add(len).ok_or_else(|| Error::Format("region end overflows".into()))?;
            if off < cursor {
                return Err(Error::Format(format!("region at {off} overlaps a previous region")));
            }
            if end > file_len {
                return Err(Error::Format(format!("region {off}..{end} exceeds file length {file_len}")));
            }
            cursor = end;
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self.buf.get(self.pos..self.pos + N).ok_or_else(|| Error::Format("truncated header".into()))?;
        self.pos += N;
        Ok(s.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
}

fn encode_frame(chunk: &EChunk) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + chunk.payload.len());
    out.push(chunk.codec_id);
    out.extend_from_slice(&chunk.uncompressed_len.to_le_bytes());
    out.extend_from_slice(&chunk.checksum.to_le_bytes());
    out.extend_from_slice(&chunk.payload);
    out
}

fn decode_frame(frame: &[u8]) -> Result<EChunk> {
    if frame.len() < FRAME_HEADER_LEN {
        return Err(Error::Format("E-chunk frame truncated".into()));
    }
    Ok(EChunk {
        codec_id: frame[0],
        uncompressed_len: u64::from_le_bytes(frame[1..9].try_into().unwrap()),
        checksum: u32::from_le_bytes(frame[9..13].try_into().unwrap()),
        payload: frame[FRAME_HEADER_LEN..].to_vec(),
    })
}

/// Compresses every tensor and writes a version-1 container to `path`.
///
/// All experts must carry the same `n` tensors, and tensor `i` must have the
/// same element count in every expert.
pub fn pack_container(
    experts: &BTreeMap<ExpertKey, Bf16Buffer>,
    k: usize,
    codec: Codec,
    path: impl AsRef<Path>,
) -> Result<ContainerHeader> {
    if experts.is_empty() {
        return Err(Error::invalid("no experts to pack"));
    }
    if k == 0 || k > u16::MAX as usize {
        return Err(Error::invalid(format!("shard count {k} out of range")));
    }
    let mut grouped: BTreeMap<(u32, u32), Vec<(u16, &Bf16Buffer)>> = BTreeMap::new();
    for (key, t) in experts {
        grouped.entry((key.layer, key.expert_id)).or_default().push((key.tensor_index, t));
    }
    let n = grouped.values().next().map(Vec::len).unwrap_or(0);
    let mut shapes: Vec<usize> = Vec::new();
    for ((layer, expert), tensors) in &grouped {
        if tensors.len() != n || tensors.iter().enumerate().any(|(i, (ti, _))| *ti as usize != i) {
            return Err(Error::invalid(format!("expert ({layer}, {expert}) must have tensors 0..{n}")));
        }
        for (i, (_, t)) in tensors.iter().enumerate() {
            match shapes.get(i) {
                None => shapes.push(t.len()),
                Some(&len) if len != t.len() => {
                    return Err(Error::invalid(format!(
                        "tensor {i} of expert ({layer}, {expert}) has {} elements, expected {len}",
                        t.len()
                    )))
                }
                _ => {}
            }
        }
    }
    if n > u16::MAX as usize {
        return Err(Error::invalid("too many tensors per expert"));
    }

    let mut cursor = ContainerHeader::table_len(grouped.len(), n, k) as u64;
    let mut entries = Vec::with_capacity(grouped.len());
    let mut regions: Vec<Vec<u8>> = Vec::new();
    for ((layer, expert_id), tensors) in &grouped {
        let mut records = Vec::with_capacity(n);
        for (_, t) in tensors {
            let (sm, shards) = decompose(t, k)?;
            let sm_offset = cursor;
            cursor += sm.len() as u64;
            let sm_crc = checksum(sm.bytes());
            regions.push(sm.into_bytes());
            let mut offs = Vec::with_capacity(k);
            let mut lens = Vec::with_capacity(k);
            for shard in &shards {
                let frame = encode_frame(&compress_shard(shard, codec)?);
                offs.push(cursor);
                lens.push(frame.len() as u64);
                cursor += frame.len() as u64;
                regions.push(frame);
            }
            records.push(TensorRecord {
                element_count: t.len() as u64,
                sm_offset,
                e_chunk_offsets: offs,
                e_chunk_lengths: lens,
                sm_crc,
            });
        }
        entries.push(ExpertEntry { layer: *layer, expert_id: *expert_id, tensors: records });
    }
    let header = ContainerHeader {
        version: VERSION,
        tensors_per_expert: n as u16,
        k: k as u16,
        codec_id: codec.id(),
        experts: entries,
    };

    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(&header.to_bytes())?;
    for r in &regions {
        w.write_all(r)?;
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(header)
}

/// Read-only handle to a packed container. Reads are positional, so a shared
/// reference can serve concurrent readers.
#[derive(Debug)]
pub struct Container {
    path: PathBuf,
    file: File,
    header: ContainerHeader,
    index: HashMap<(u32, u32), usize>,
}

impl Container {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let file_len = file.metadata()?.len();
        let mut prefix = vec![0u8; (FIXED_HEADER_LEN as u64).min(file_len) as usize];
        read_exact_at(&file, &mut prefix, 0)?;
        if prefix.len() < FIXED_HEADER_LEN {
            return Err(Error::Format("file shorter than the fixed header".into()));
        }
        if &prefix[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:02x?}", &prefix[..4])));
        }
        let num_experts = u32::from_le_bytes(prefix[6..10].try_into().unwrap()) as usize;
        let n = u16::from_le_bytes(prefix[10..12].try_into().unwrap()) as usize;
        let k = u16::from_le_bytes(prefix[12..14].try_into().unwrap()) as usize;
        let total = ContainerHeader::table_len(num_experts, n, k) as u64;
        if total > file_len {
            return Err(Error::Format(format!("header needs {total} bytes, file has {file_len}")));
        }
        let mut head = vec![0u8; total as usize];
        read_exact_at(&file, &mut head, 0)?;
        let header = ContainerHeader::parse(&head)?;
        header.validate_regions(file_len)?;
        let index = header.experts.iter().enumerate().map(|(i, e)| ((e.layer, e.expert_id), i)).collect();
        Ok(Self { path, file, header, index })
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn k(&self) -> usize {
        self.header.k as usize
    }

    pub fn tensors_per_expert(&self) -> usize {
        self.header.tensors_per_expert as usize
    }

    pub fn codec(&self) -> Result<Codec> {
        Codec::from_id(self.header.codec_id)
    }

    /// `(layer, expert_id)` pairs in table order.
    pub fn experts(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.header.experts.iter().map(|e| (e.layer, e.expert_id))
    }

    pub fn contains_expert(&self, layer: u32, expert_id: u32) -> bool {
        self.index.contains_key(&(layer, expert_id))
    }

    pub fn record(&self, key: ExpertKey) -> Result<&TensorRecord> {
        let &i = self
            .index
            .get(&(key.layer, key.expert_id))
            .ok_or_else(|| Error::NotFound(format!("expert ({}, {})", key.layer, key.expert_id)))?;
        self.header.experts[i].tensors.get(key.tensor_index as usize).ok_or_else(|| {
            Error::NotFound(format!("tensor {} of expert ({}, {})", key.tensor_index, key.layer, key.expert_id))
        })
    }

    fn read_region(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len as usize];
        read_exact_at(&self.file, &mut buf, offset).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format(format!("file truncated reading {len} bytes at {offset}"))
            } else {
                Error::Io(e)
            }
        })?;
        Ok(buf)
    }

    /// Reads a tensor's SM-chunk and verifies its CRC.
    pub fn read_sm(&self, key: ExpertKey) -> Result<SmChunk> {
        let rec = self.record(key)?;
        let bytes = self.read_region(rec.sm_offset, rec.element_count)?;
        if checksum(&bytes) != rec.sm_crc {
            return Err(Error::Corruption(format!("SM-chunk CRC mismatch for {key:?}")));
        }
        Ok(SmChunk::from_bytes(bytes))
    }

    /// Reads one E-chunk frame. The CRC is checked when the chunk is decompressed.
    pub fn read_echunk(&self, key: ExpertKey, shard_index: usize) -> Result<EChunk> {
        let rec = self.record(key)?;
        if shard_index >= rec.e_chunk_offsets.len() {
            return Err(Error::NotFound(format!("shard {shard_index} of {key:?} (K = {})", rec.e_chunk_offsets.len())));
        }
        let frame = self.read_region(rec.e_chunk_offsets[shard_index], rec.e_chunk_lengths[shard_index])?;
        decode_frame(&frame)
    }

    /// Reads and decodes every chunk of one tensor.
    pub fn reconstruct(&self, key: ExpertKey) -> Result<Bf16Buffer> {
        let sm = self.read_sm(key)?;
        let mut exp = Vec::with_capacity(sm.len());
        for s in 0..self.k() {
            exp.extend(decompress_chunk(&self.read_echunk(key, s)?)?);
        }
        recompose(&sm, &exp)
    }
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}
