//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only what the pipeline needs: 3D scalar payloads (plus a 4D payload for
//! per-class probability volumes), voxel spacing, and intensity scaling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{ChannelVolume, Geometry, Grid, LabelVolume, Mask, ProbVolume, RegionMap, Volume3D};
use crate::error::{Error, Result};
use crate::labelspace::{Class, Label};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const CLASSES_TAG: &str = "partseg:classes=";

mod offsets {
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DataType {
    U8,
    I16,
    I32,
    F32,
    F64,
    I8,
    U16,
    U32,
}

impl DataType {
    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Self::U8,
            4 => Self::I16,
            8 => Self::I32,
            16 => Self::F32,
            64 => Self::F64,
            256 => Self::I8,
            512 => Self::U16,
            768 => Self::U32,
            other => return Err(Error::Nifti(format!("unsupported datatype code {other}"))),
        })
    }

    fn code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::I32 => 8,
            Self::F32 => 16,
            Self::F64 => 64,
            Self::I8 => 256,
            Self::U16 => 512,
            Self::U32 => 768,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::U8 | Self::I8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// Decoded file contents before conversion to a typed grid.
struct Raw {
    geom: Geometry,
    channels: usize,
    descrip: String,
    values: Vec<f64>,
    /// Set when the payload is f32 without scaling, so floats survive bit-exactly.
    f32_values: Option<Vec<f32>>,
}

struct Endian {
    big: bool,
}

impl Endian {
    fn i16(&self, b: &[u8], at: usize) -> i16 {
        let a = [b[at], b[at + 1]];
        if self.big {
            i16::from_be_bytes(a)
        } else {
            i16::from_le_bytes(a)
        }
    }

    fn i32(&self, b: &[u8], at: usize) -> i32 {
        let a = [b[at], b[at + 1], b[at + 2], b[at + 3]];
        if self.big {
            i32::from_be_bytes(a)
        } else {
            i32::from_le_bytes(a)
        }
    }

    fn f32(&self, b: &[u8], at: usize) -> f32 {
        f32::from_bits(self.i32(b, at) as u32)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn decode(bytes: &[u8]) -> Result<Raw> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!(
            "file too short for a header ({} bytes)",
            bytes.len()
        )));
    }
    let endian = if i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == 348 {
        Endian { big: false }
    } else if i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == 348 {
        Endian { big: true }
    } else {
        return Err(Error::Nifti("sizeof_hdr is not 348".into()));
    };
    if &bytes[offsets::MAGIC..offsets::MAGIC + 4] != MAGIC {
        return Err(Error::Nifti(
            "missing single-file NIfTI-1 magic \"n+1\"".into(),
        ));
    }

    let ndim = endian.i16(bytes, offsets::DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("invalid dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 7];
    for (d, slot) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = endian.i16(bytes, offsets::DIM + 2 * (d + 1));
        if v <= 0 {
            return Err(Error::Nifti(format!("non-positive dim[{}] = {v}", d + 1)));
        }
        *slot = v as usize;
    }
    if dims[4..].iter().any(|&d| d != 1) {
        return Err(Error::Nifti(format!(
            "payload has more than four dimensions: {:?}",
            &dims[..ndim as usize]
        )));
    }
    let channels = dims[3];

    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = endian.f32(bytes, offsets::PIXDIM + 4 * (a + 1)).abs() as f64;
        *s = if v > 0.0 && v.is_finite() { v } else { 1.0 };
    }
    let geom = Geometry::new([dims[0], dims[1], dims[2]], spacing)?;

    let dtype = DataType::from_code(endian.i16(bytes, offsets::DATATYPE))?;
    let vox_offset = endian.f32(bytes, offsets::VOX_OFFSET);
    let vox_offset = if vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32 {
        vox_offset as usize
    } else {
        VOX_OFFSET
    };
    let n = geom.len() * channels;
    let end = vox_offset + n * dtype.size();
    if bytes.len() < end {
        return Err(Error::Nifti(format!(
            "payload truncated: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let payload = &bytes[vox_offset..end];

    let slope = endian.f32(bytes, offsets::SCL_SLOPE);
    let inter = endian.f32(bytes, offsets::SCL_INTER);
    let scaled = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);

    let sz = dtype.size();
    let at = |i: usize| i * sz;
    let f32_values = if dtype == DataType::F32 && !scaled {
        Some((0..n).map(|i| endian.f32(payload, at(i))).collect())
    } else {
        None
    };
    let mut values: Vec<f64> = (0..n)
        .map(|i| match dtype {
            DataType::U8 => payload[i] as f64,
            DataType::I8 => payload[i] as i8 as f64,
            DataType::I16 => endian.i16(payload, at(i)) as f64,
            DataType::U16 => endian.i16(payload, at(i)) as u16 as f64,
            DataType::I32 => endian.i32(payload, at(i)) as f64,
            DataType::U32 => endian.i32(payload, at(i)) as u32 as f64,
            DataType::F32 => endian.f32(payload, at(i)) as f64,
            DataType::F64 => {
                let mut a = [0u8; 8];
                a.copy_from_slice(&payload[at(i)..at(i) + 8]);
                if endian.big {
                    f64::from_be_bytes(a)
                } else {
                    f64::from_le_bytes(a)
                }
            }
        })
        .collect();
    if scaled {
        for v in &mut values {
            *v = *v * slope as f64 + inter as f64;
        }
    }

    let descrip_raw = &bytes[offsets::DESCRIP..offsets::DESCRIP + 80];
    let descrip_end = descrip_raw.iter().position(|&b| b == 0).unwrap_or(80);
    let descrip = String::from_utf8_lossy(&descrip_raw[..descrip_end]).into_owned();

    Ok(Raw {
        geom,
        channels,
        descrip,
        values,
        f32_values,
    })
}

fn load(path: &Path) -> Result<Raw> {
    let bytes = read_bytes(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Nifti(msg) => Error::Nifti(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn expect_scalar(raw: &Raw, path: &Path) -> Result<()> {
    if raw.channels != 1 {
        return Err(Error::Nifti(format!(
            "{}: expected a 3D scalar payload, found {} volumes",
            path.display(),
            raw.channels
        )));
    }
    Ok(())
}

/// Reads a 3D scalar image. Any supported datatype is converted to `f32`.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let raw = load(path)?;
    expect_scalar(&raw, path)?;
    let data = match raw.f32_values {
        Some(v) => v,
        None => raw.values.iter().map(|&v| v as f32).collect(),
    };
    Grid::new(raw.geom, data)
}

/// Reads a label map with codes 0 (BG), 1 (WMH), 2 (ISL).
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let raw = load(path)?;
    expect_scalar(&raw, path)?;
    let data = raw
        .values
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 {
                return Err(Error::Data(format!(
                    "{}: non-integer label value {v}",
                    path.display()
                )));
            }
            Label::from_code(v as i64).ok_or_else(|| {
                Error::Data(format!("{}: label code {v} outside {{0,1,2}}", path.display()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Grid::new(raw.geom, data)
}

/// Reads a binary mask; any nonzero voxel is foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let raw = load(path)?;
    expect_scalar(&raw, path)?;
    Grid::new(raw.geom, raw.values.iter().map(|&v| v != 0.0).collect())
}

/// Reads an integer region map (e.g. an anatomy segmentation).
pub fn read_region_map(path: impl AsRef<Path>) -> Result<RegionMap> {
    let path = path.as_ref();
    let raw = load(path)?;
    expect_scalar(&raw, path)?;
    let data = raw
        .values
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                Err(Error::Data(format!(
                    "{}: region id {v} is not a non-negative integer",
                    path.display()
                )))
            } else {
                Ok(v as u32)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Grid::new(raw.geom, data)
}

/// Reads a per-class probability volume written by [`write_volume`].
pub fn read_prob_volume(path: impl AsRef<Path>) -> Result<ProbVolume> {
    let path = path.as_ref();
    let raw = load(path)?;
    let classes = raw
        .descrip
        .strip_prefix(CLASSES_TAG)
        .ok_or_else(|| {
            Error::Nifti(format!(
                "{}: no class list in header description",
                path.display()
            ))
        })?
        .split(',')
        .map(|s| s.parse::<Class>())
        .collect::<Result<Vec<_>>>()?;
    if classes.len() != raw.channels {
        return Err(Error::Nifti(format!(
            "{}: {} classes declared but {} volumes stored",
            path.display(),
            classes.len(),
            raw.channels
        )));
    }
    let n = raw.geom.len();
    let k = classes.len();
    let mut data = vec![0.0; n * k];
    for c in 0..k {
        for i in 0..n {
            data[i * k + c] = raw.values[c * n + i];
        }
    }
    ChannelVolume::new(raw.geom, classes, data)
}

/// Payload ready to be written: channel-major values in the stored datatype.
pub struct Encoded {
    geom: Geometry,
    channels: usize,
    dtype: DataType,
    payload: Vec<u8>,
    descrip: String,
}

/// Grid types that can be stored as NIfTI-1.
pub trait NiftiWritable {
    fn encode(&self) -> Encoded;
}

impl NiftiWritable for Volume3D {
    fn encode(&self) -> Encoded {
        Encoded {
            geom: *self.geom(),
            channels: 1,
            dtype: DataType::F32,
            payload: self.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            descrip: String::new(),
        }
    }
}

impl NiftiWritable for LabelVolume {
    fn encode(&self) -> Encoded {
        Encoded {
            geom: *self.geom(),
            channels: 1,
            dtype: DataType::U8,
            payload: self.data().iter().map(|l| l.code()).collect(),
            descrip: String::new(),
        }
    }
}

impl NiftiWritable for Mask {
    fn encode(&self) -> Encoded {
        Encoded {
            geom: *self.geom(),
            channels: 1,
            dtype: DataType::U8,
            payload: self.data().iter().map(|&b| b as u8).collect(),
            descrip: String::new(),
        }
    }
}

impl NiftiWritable for RegionMap {
    fn encode(&self) -> Encoded {
        Encoded {
            geom: *self.geom(),
            channels: 1,
            dtype: DataType::U32,
            payload: self.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            descrip: String::new(),
        }
    }
}

impl NiftiWritable for ChannelVolume {
    fn encode(&self) -> Encoded {
        let n = self.voxels();
        let k = self.channels();
        let mut payload = Vec::with_capacity(n * k * 4);
        for c in 0..k {
            for i in 0..n {
                payload.extend_from_slice(&(self.data()[i * k + c] as f32).to_le_bytes());
            }
        }
        let names: Vec<String> = self.classes().iter().map(|c| c.to_string()).collect();
        Encoded {
            geom: *self.geom(),
            channels: k,
            dtype: DataType::F32,
            payload,
            descrip: format!("{CLASSES_TAG}{}", names.join(",")),
        }
    }
}

fn header(enc: &Encoded) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let shape = enc.geom.shape();
    let mut dim = [0i16; 8];
    dim[0] = if enc.channels > 1 { 4 } else { 3 };
    for a in 0..3 {
        dim[a + 1] = shape[a] as i16;
    }
    dim[4] = enc.channels as i16;
    for d in dim.iter_mut().skip(5) {
        *d = 1;
    }
    for (d, v) in dim.iter().enumerate() {
        h[offsets::DIM + 2 * d..offsets::DIM + 2 * d + 2].copy_from_slice(&v.to_le_bytes());
    }
    h[offsets::DATATYPE..offsets::DATATYPE + 2].copy_from_slice(&enc.dtype.code().to_le_bytes());
    h[offsets::BITPIX..offsets::BITPIX + 2]
        .copy_from_slice(&((enc.dtype.size() * 8) as i16).to_le_bytes());
    let spacing = enc.geom.spacing();
    let mut pixdim = [1.0f32; 8];
    for a in 0..3 {
        pixdim[a + 1] = spacing[a] as f32;
    }
    for (d, v) in pixdim.iter().enumerate() {
        h[offsets::PIXDIM + 4 * d..offsets::PIXDIM + 4 * d + 4].copy_from_slice(&v.to_le_bytes());
    }
    h[offsets::VOX_OFFSET..offsets::VOX_OFFSET + 4]
        .copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[offsets::SCL_SLOPE..offsets::SCL_SLOPE + 4].copy_from_slice(&1.0f32.to_le_bytes());
    h[offsets::SCL_INTER..offsets::SCL_INTER + 4].copy_from_slice(&0.0f32.to_le_bytes());
    h[offsets::XYZT_UNITS] = 2; // mm
    let descrip = enc.descrip.as_bytes();
    let len = descrip.len().min(79);
    h[offsets::DESCRIP..offsets::DESCRIP + len].copy_from_slice(&descrip[..len]);
    h[offsets::QFORM_CODE..offsets::QFORM_CODE + 2].copy_from_slice(&1i16.to_le_bytes());
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC);
    h
}

/// Writes any supported grid. A `.gz` suffix selects gzip compression;
/// existing files are overwritten.
pub fn write_volume<V: NiftiWritable + ?Sized>(v: &V, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let enc = v.encode();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let result = if gz {
        let mut w = GzEncoder::new(BufWriter::new(file), Compression::fast());
        w.write_all(&header(&enc))
            .and_then(|_| w.write_all(&enc.payload))
            .and_then(|_| w.finish().and_then(|mut b| b.flush()))
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&header(&enc))
            .and_then(|_| w.write_all(&enc.payload))
            .and_then(|_| w.flush())
    };
    result.map_err(|e| Error::io(path, e))
}
