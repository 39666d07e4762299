//! Binary file formats.
//!
//! Volume files (`MSV1`):
//!
//! ```text
//! offset 0   magic  "MSV1"
//!        4   kind   u8   0 = intensity f64, 1 = labels u16, 2 = field f64×3
//!        5   rank   u8   always 3 (D, H, W)
//!        6   extents u32 LE × rank
//!        ..  payload, row-major little-endian
//! ```
//!
//! Field payloads hold `3·D·H·W` values in the `(3, D, H, W)` component-major
//! layout of [`DisplacementField`].
//!
//! Checkpoints (`MSK1`): magic, version u32, parameter count u32, then per
//! parameter a u16 name length, the UTF-8 name, a u8 rank, u32 extents and
//! the f64 payload, all little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::{DisplacementField, LabelMap, Volume};
use crate::network::ParamStore;
use crate::tensor::{Tensor, MAX_RANK};

pub const VOLUME_MAGIC: &[u8; 4] = b"MSV1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum VolumeKind {
    Intensity = 0,
    Labels = 1,
    Field = 2,
}

impl VolumeKind {
    fn elem_bytes(self) -> u64 {
        match self {
            VolumeKind::Intensity => 8,
            VolumeKind::Labels => 2,
            VolumeKind::Field => 24,
        }
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn header(kind: VolumeKind, dims: [usize; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 12);
    out.extend_from_slice(VOLUME_MAGIC);
    out.push(kind as u8);
    out.push(3);
    for e in dims {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(VolumeKind::Intensity, v.dims());
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_labels(l: &LabelMap) -> Vec<u8> {
    let mut out = header(VolumeKind::Labels, l.dims());
    for x in l.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_field(u: &DisplacementField) -> Vec<u8> {
    let mut out = header(VolumeKind::Field, u.dims());
    for x in u.tensor().data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Parses and validates an `MSV1` header, returning the extents and the
/// payload slice.
fn decode_header(bytes: &[u8], want: VolumeKind) -> Result<([usize; 3], &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    if bytes.len() < 6 {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let kind = bytes[4];
    if kind > 2 {
        return Err(Error::format(4, format!("unknown kind {kind}")));
    }
    if kind != want as u8 {
        return Err(Error::format(
            4,
            format!("kind mismatch: expected {}, found {kind}", want as u8),
        ));
    }
    let rank = bytes[5] as usize;
    if rank != 3 {
        return Err(Error::format(5, format!("unsupported rank {rank}")));
    }
    let ext_end = 6 + 4 * rank;
    if bytes.len() < ext_end {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let mut dims = [0usize; 3];
    let mut count: u64 = 1;
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 6 + 4 * i;
        let e = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
        count = count
            .checked_mul(e as u64)
            .filter(|&c| e > 0 && c.checked_mul(want.elem_bytes()).is_some_and(|b| b <= isize::MAX as u64))
            .ok_or_else(|| Error::format(off as u64, format!("extent overflow ({e})")))?;
        *d = e as usize;
    }
    let need = count * want.elem_bytes();
    let payload = &bytes[ext_end..];
    if (payload.len() as u64) < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload (expected {need} bytes, found {})", payload.len()),
        ));
    }
    if payload.len() as u64 > need {
        return Err(Error::format(ext_end as u64 + need, "trailing bytes"));
    }
    Ok((dims, payload))
}

fn f64s(payload: &[u8]) -> Vec<f64> {
    payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let (dims, payload) = decode_header(bytes, VolumeKind::Intensity)?;
    Volume::from_data(dims, f64s(payload))
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap> {
    let (dims, payload) = decode_header(bytes, VolumeKind::Labels)?;
    let data = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelMap::new(dims, data)
}

pub fn decode_field(bytes: &[u8]) -> Result<DisplacementField> {
    let (dims, payload) = decode_header(bytes, VolumeKind::Field)?;
    DisplacementField::new(Tensor::new(&[3, dims[0], dims[1], dims[2]], f64s(payload))?)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(v))
}

pub fn write_labels(path: &Path, l: &LabelMap) -> Result<()> {
    write_atomic(path, &encode_labels(l))
}

pub fn write_field(path: &Path, u: &DisplacementField) -> Result<()> {
    write_atomic(path, &encode_field(u))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    decode_labels(&fs::read(path)?)
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    decode_field(&fs::read(path)?)
}

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * params.total_elements());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.bytes.len() as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("header")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "record")?.try_into().expect("2 bytes")) as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "record")?)
            .map_err(|_| Error::format(name_at as u64, "name is not UTF-8"))?
            .to_string();
        let rank_at = r.pos;
        let rank = r.take(1, "record")?[0] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(rank_at as u64, format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let at = r.pos;
            let e = r.u32("record")? as usize;
            count = count
                .checked_mul(e)
                .filter(|&c| e > 0 && c <= (isize::MAX as usize) / 8)
                .ok_or_else(|| Error::format(at as u64, format!("extent overflow ({e})")))?;
            shape.push(e);
        }
        let data = f64s(r.take(8 * count, "payload")?);
        store.push(name, Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes"));
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    decode_checkpoint(&fs::read(path)?)
}
