//! Binary volume (`H3DV`) and mask (`H3DM`) files.
//!
//! H3DV layout, all little-endian: magic `H3DV`, u16 version, u8 modality
//! (0 kVCT, 1 MVCT), u32 C, D, H, W, f64 window min, f64 window max, then
//! C·D·H·W f32 HU values in row-major order.
//!
//! H3DM layout: magic `H3DM`, u16 version, u32 D, H, W, then one byte per
//! voxel with bit 0 = body and bit 1 = metal.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::volume::{HuWindow, Modality, Units, Volume};

const VOLUME_MAGIC: &[u8; 4] = b"H3DV";
const MASK_MAGIC: &[u8; 4] = b"H3DM";
const VERSION: u16 = 1;

/// Cursor over a byte buffer that reports truncation as a format error.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("{} truncated at byte {} (wanted {n} more)", self.what, self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// u16 length prefix, then UTF-8 bytes.
    pub(crate) fn short_str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        self.utf8(n)
    }

    pub(crate) fn utf8(&mut self, n: usize) -> Result<String> {
        let what = self.what;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format(format!("{what}: invalid UTF-8 text")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{} size overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn dims_u32(dims: &[usize]) -> Result<Vec<u32>> {
    dims.iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32"))))
        .collect()
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    if v.units != Units::Hu {
        return Err(Error::Data("volume files hold HU values; denormalize before writing".into()));
    }
    let (c, d, h, w) = v.dims();
    let mut out = Vec::with_capacity(4 + 2 + 1 + 16 + 16 + 4 * c * d * h * w);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(v.modality.code());
    for x in dims_u32(&[c, d, h, w])? {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&v.window.min.to_le_bytes());
    out.extend_from_slice(&v.window.max.to_le_bytes());
    for x in v.data().iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = ByteReader::new(bytes, "volume file");
    r.expect_magic(VOLUME_MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported volume version {version}")));
    }
    let code = r.u8()?;
    let modality = Modality::from_code(code).ok_or_else(|| Error::Format(format!("unknown modality code {code}")))?;
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|x| x as usize);
    let window = HuWindow::new(r.f64()?, r.f64()?).map_err(|e| Error::Format(e.to_string()))?;
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("dims overflow".into()))?;
    let data = r.f32s(n)?;
    r.finish()?;
    let arr = Array4::from_shape_vec(dims, data).map_err(|e| Error::Format(e.to_string()))?;
    Volume::from_hu(arr, modality, window).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(v)?).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn encode_masks(body: &Array3<bool>, metal: &Array3<bool>) -> Result<Vec<u8>> {
    if body.dim() != metal.dim() {
        return Err(Error::Shape(format!("mask dims differ: {:?} vs {:?}", body.dim(), metal.dim())));
    }
    let (d, h, w) = body.dim();
    let mut out = Vec::with_capacity(4 + 2 + 12 + d * h * w);
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for x in dims_u32(&[d, h, w])? {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend(body.iter().zip(metal.iter()).map(|(&b, &m)| b as u8 | (m as u8) << 1));
    Ok(out)
}

pub fn decode_masks(bytes: &[u8]) -> Result<(Array3<bool>, Array3<bool>)> {
    let mut r = ByteReader::new(bytes, "mask file");
    r.expect_magic(MASK_MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported mask version {version}")));
    }
    let dims = [r.u32()?, r.u32()?, r.u32()?].map(|x| x as usize);
    let n = dims.iter().product();
    let raw = r.take(n)?;
    r.finish()?;
    if let Some(bad) = raw.iter().find(|&&b| b > 3) {
        return Err(Error::Format(format!("invalid mask byte {bad}")));
    }
    let body = Array3::from_shape_vec(dims, raw.iter().map(|b| b & 1 != 0).collect()).unwrap();
    let metal = Array3::from_shape_vec(dims, raw.iter().map(|b| b & 2 != 0).collect()).unwrap();
    Ok((body, metal))
}

pub fn write_masks(path: impl AsRef<Path>, body: &Array3<bool>, metal: &Array3<bool>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_masks(body, metal)?).map_err(|e| Error::io(path, e))
}

pub fn read_masks(path: impl AsRef<Path>) -> Result<(Array3<bool>, Array3<bool>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_masks(&bytes)
}
