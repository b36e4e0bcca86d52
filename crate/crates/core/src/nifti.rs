//! NIfTI-1 reading and writing.
//!
//! The 348-byte header is decoded field by field so that a parse/write
//! cycle reproduces every byte of it. Anything between the header and
//! `vox_offset` (the extension flag and any extension blocks) is kept
//! verbatim in [`NiftiHeader::extension`]. Only the first 3D frame of
//! higher-dimensional files is loaded.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::affine::Affine4x4;
use crate::error::{Error, Result};
use crate::volume::Volume3D;

pub const HEADER_SIZE: usize = 348;
pub const SINGLE_FILE_MAGIC: [u8; 4] = *b"n+1\0";
pub const PAIR_MAGIC: [u8; 4] = *b"ni1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Endianness {
    #[default]
    Little,
    Big,
}

/// Voxel storage types accepted by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Self::Uint8,
            4 => Self::Int16,
            8 => Self::Int32,
            16 => Self::Float32,
            64 => Self::Float64,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Self::Uint8 => 2,
            Self::Int16 => 4,
            Self::Int32 => 8,
            Self::Float32 => 16,
            Self::Float64 => 64,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Self::Uint8 => 1,
            Self::Int16 => 2,
            Self::Int32 | Self::Float32 => 4,
            Self::Float64 => 8,
        }
    }

    pub fn bitpix(self) -> i16 {
        (self.bytes() * 8) as i16
    }
}

/// Every field of the NIfTI-1 header, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub endianness: Endianness,
    pub sizeof_hdr: i32,
    pub data_type: [u8; 10],
    pub db_name: [u8; 18],
    pub extents: i32,
    pub session_error: i16,
    pub regular: u8,
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub intent_p1: f32,
    pub intent_p2: f32,
    pub intent_p3: f32,
    pub intent_code: i16,
    pub datatype_code: i16,
    pub bitpix: i16,
    pub slice_start: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub slice_end: i16,
    pub slice_code: u8,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub slice_duration: f32,
    pub toffset: f32,
    pub glmax: i32,
    pub glmin: i32,
    pub descrip: [u8; 80],
    pub aux_file: [u8; 24],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern_b: f32,
    pub quatern_c: f32,
    pub quatern_d: f32,
    pub qoffset_x: f32,
    pub qoffset_y: f32,
    pub qoffset_z: f32,
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub intent_name: [u8; 16],
    pub magic: [u8; 4],
    /// Raw bytes between the header and `vox_offset` (single-file only).
    pub extension: Vec<u8>,
}

impl Default for NiftiHeader {
    fn default() -> Self {
        Self {
            endianness: Endianness::Little,
            sizeof_hdr: HEADER_SIZE as i32,
            data_type: [0; 10],
            db_name: [0; 18],
            extents: 0,
            session_error: 0,
            regular: b'r',
            dim_info: 0,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_p1: 0.0,
            intent_p2: 0.0,
            intent_p3: 0.0,
            intent_code: 0,
            datatype_code: Datatype::Float32.code(),
            bitpix: Datatype::Float32.bitpix(),
            slice_start: 0,
            pixdim: [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vox_offset: 352.0,
            scl_slope: 1.0,
            scl_inter: 0.0,
            slice_end: 0,
            slice_code: 0,
            xyzt_units: 2, // mm
            cal_max: 0.0,
            cal_min: 0.0,
            slice_duration: 0.0,
            toffset: 0.0,
            glmax: 0,
            glmin: 0,
            descrip: [0; 80],
            aux_file: [0; 24],
            qform_code: 0,
            sform_code: 0,
            quatern_b: 0.0,
            quatern_c: 0.0,
            quatern_d: 0.0,
            qoffset_x: 0.0,
            qoffset_y: 0.0,
            qoffset_z: 0.0,
            srow_x: [1.0, 0.0, 0.0, 0.0],
            srow_y: [0.0, 1.0, 0.0, 0.0],
            srow_z: [0.0, 0.0, 1.0, 0.0],
            intent_name: [0; 16],
            magic: SINGLE_FILE_MAGIC,
            extension: vec![0; 4],
        }
    }
}

impl NiftiHeader {
    /// Single-file header describing `volume` with the given storage type,
    /// identity scaling and an sform copied from the volume affine.
    pub fn for_volume(volume: &Volume3D, datatype: Datatype) -> Self {
        let shape = volume.shape();
        let spacing = volume.spacing();
        let rows = volume.affine().rows();
        let mut h = NiftiHeader {
            datatype_code: datatype.code(),
            bitpix: datatype.bitpix(),
            sform_code: 1,
            ..Default::default()
        };
        h.dim = [3, shape[0] as i16, shape[1] as i16, shape[2] as i16, 1, 1, 1, 1];
        h.pixdim = [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 0.0, 0.0, 0.0, 0.0];
        h.srow_x = rows[0].map(|v| v as f32);
        h.srow_y = rows[1].map(|v| v as f32);
        h.srow_z = rows[2].map(|v| v as f32);
        h
    }

    pub fn datatype(&self) -> Result<Datatype> {
        Datatype::from_code(self.datatype_code)
    }

    pub fn is_single_file(&self) -> bool {
        self.magic == SINGLE_FILE_MAGIC
    }

    /// Spatial shape of the first 3D frame.
    pub fn shape(&self) -> Result<[usize; 3]> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(Error::Nifti(format!("dim[0] = {ndim} is outside [1, 7]")));
        }
        let mut shape = [1usize; 3];
        for (a, slot) in shape.iter_mut().enumerate() {
            if (a as i16) < ndim {
                let d = self.dim[a + 1];
                if d < 1 {
                    return Err(Error::Nifti(format!("dim[{}] = {d} must be >= 1", a + 1)));
                }
                *slot = d as usize;
            }
        }
        Ok(shape)
    }

    /// Number of voxels across all dimensions.
    pub fn total_voxels(&self) -> Result<usize> {
        let shape = self.shape()?;
        let mut n: usize = shape.iter().product();
        for k in 4..=self.dim[0] as usize {
            n *= self.dim[k].max(1) as usize;
        }
        Ok(n)
    }

    /// Voxel spacing from `pixdim[1..=3]`; zero or missing entries read as 1 mm.
    pub fn spacing(&self) -> [f64; 3] {
        std::array::from_fn(|a| {
            let v = (self.pixdim[a + 1] as f64).abs();
            if v > 0.0 && v.is_finite() {
                v
            } else {
                1.0
            }
        })
    }

    fn validate(&self) -> Result<()> {
        if self.sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::Nifti(format!("sizeof_hdr is {}, expected 348", self.sizeof_hdr)));
        }
        if self.magic != SINGLE_FILE_MAGIC && self.magic != PAIR_MAGIC {
            return Err(Error::Nifti(format!("bad magic {:?}", self.magic)));
        }
        self.shape()?;
        let dt = self.datatype()?;
        if self.bitpix != dt.bitpix() {
            return Err(Error::Nifti(format!(
                "bitpix {} does not match datatype code {}",
                self.bitpix, self.datatype_code
            )));
        }
        if self.is_single_file() && self.vox_offset < 352.0 {
            return Err(Error::Nifti(format!("vox_offset {} < 352 for a single-file NIfTI", self.vox_offset)));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    big: bool,
}

impl<'a> Reader<'a> {
    fn bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        out
    }
    fn ordered<const N: usize>(&mut self) -> [u8; N] {
        let mut b = self.bytes::<N>();
        if self.big {
            b.reverse();
        }
        b
    }
    fn u8(&mut self) -> u8 {
        self.bytes::<1>()[0]
    }
    fn i16(&mut self) -> i16 {
        i16::from_le_bytes(self.ordered())
    }
    fn i32(&mut self) -> i32 {
        i32::from_le_bytes(self.ordered())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.ordered())
    }
}

struct Writer {
    buf: Vec<u8>,
    big: bool,
}

impl Writer {
    fn raw(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn ordered<const N: usize>(&mut self, mut b: [u8; N]) {
        if self.big {
            b.reverse();
        }
        self.buf.extend_from_slice(&b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn i16(&mut self, v: i16) {
        self.ordered(v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.ordered(v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.ordered(v.to_le_bytes());
    }
}

/// Decodes the 348-byte header, probing `sizeof_hdr` for byte order.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!("stream has {} bytes, header needs 348", bytes.len())));
    }
    let probe: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    let big = if i32::from_le_bytes(probe) == HEADER_SIZE as i32 {
        false
    } else if i32::from_be_bytes(probe) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(Error::Nifti(format!(
            "sizeof_hdr is neither 348 little- nor big-endian ({probe:?})"
        )));
    };
    let mut r = Reader { buf: bytes, pos: 0, big };
    let mut h = NiftiHeader {
        endianness: if big { Endianness::Big } else { Endianness::Little },
        sizeof_hdr: r.i32(),
        data_type: r.bytes(),
        db_name: r.bytes(),
        extents: r.i32(),
        session_error: r.i16(),
        regular: r.u8(),
        dim_info: r.u8(),
        ..Default::default()
    };
    for d in h.dim.iter_mut() {
        *d = r.i16();
    }
    h.intent_p1 = r.f32();
    h.intent_p2 = r.f32();
    h.intent_p3 = r.f32();
    h.intent_code = r.i16();
    h.datatype_code = r.i16();
    h.bitpix = r.i16();
    h.slice_start = r.i16();
    for p in h.pixdim.iter_mut() {
        *p = r.f32();
    }
    h.vox_offset = r.f32();
    h.scl_slope = r.f32();
    h.scl_inter = r.f32();
    h.slice_end = r.i16();
    h.slice_code = r.u8();
    h.xyzt_units = r.u8();
    h.cal_max = r.f32();
    h.cal_min = r.f32();
    h.slice_duration = r.f32();
    h.toffset = r.f32();
    h.glmax = r.i32();
    h.glmin = r.i32();
    h.descrip = r.bytes();
    h.aux_file = r.bytes();
    h.qform_code = r.i16();
    h.sform_code = r.i16();
    h.quatern_b = r.f32();
    h.quatern_c = r.f32();
    h.quatern_d = r.f32();
    h.qoffset_x = r.f32();
    h.qoffset_y = r.f32();
    h.qoffset_z = r.f32();
    for s in h.srow_x.iter_mut() {
        *s = r.f32();
    }
    for s in h.srow_y.iter_mut() {
        *s = r.f32();
    }
    for s in h.srow_z.iter_mut() {
        *s = r.f32();
    }
    h.intent_name = r.bytes();
    h.magic = r.bytes();
    debug_assert_eq!(r.pos, HEADER_SIZE);
    h.extension = Vec::new();
    Ok(h)
}

/// Encodes the header in its own byte order (348 bytes, no extension).
pub fn encode_header(h: &NiftiHeader) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::with_capacity(HEADER_SIZE),
        big: h.endianness == Endianness::Big,
    };
    w.i32(h.sizeof_hdr);
    w.raw(&h.data_type);
    w.raw(&h.db_name);
    w.i32(h.extents);
    w.i16(h.session_error);
    w.u8(h.regular);
    w.u8(h.dim_info);
    for &d in &h.dim {
        w.i16(d);
    }
    w.f32(h.intent_p1);
    w.f32(h.intent_p2);
    w.f32(h.intent_p3);
    w.i16(h.intent_code);
    w.i16(h.datatype_code);
    w.i16(h.bitpix);
    w.i16(h.slice_start);
    for &p in &h.pixdim {
        w.f32(p);
    }
    w.f32(h.vox_offset);
    w.f32(h.scl_slope);
    w.f32(h.scl_inter);
    w.i16(h.slice_end);
    w.u8(h.slice_code);
    w.u8(h.xyzt_units);
    w.f32(h.cal_max);
    w.f32(h.cal_min);
    w.f32(h.slice_duration);
    w.f32(h.toffset);
    w.i32(h.glmax);
    w.i32(h.glmin);
    w.raw(&h.descrip);
    w.raw(&h.aux_file);
    w.i16(h.qform_code);
    w.i16(h.sform_code);
    w.f32(h.quatern_b);
    w.f32(h.quatern_c);
    w.f32(h.quatern_d);
    w.f32(h.qoffset_x);
    w.f32(h.qoffset_y);
    w.f32(h.qoffset_z);
    for &s in h.srow_x.iter().chain(&h.srow_y).chain(&h.srow_z) {
        w.f32(s);
    }
    w.raw(&h.intent_name);
    w.raw(&h.magic);
    debug_assert_eq!(w.buf.len(), HEADER_SIZE);
    w.buf
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::Nifti(format!("gzip decode failed: {e}")))?;
    Ok(out)
}

/// Parses a single-file (`n+1`) NIfTI-1 stream, gzip-wrapped or not.
pub fn parse_nifti(bytes: &[u8]) -> Result<(NiftiHeader, Volume3D)> {
    let owned;
    let bytes = if is_gzip(bytes) {
        owned = gunzip(bytes)?;
        &owned[..]
    } else {
        bytes
    };
    let mut header = parse_header(bytes)?;
    header.validate()?;
    if !header.is_single_file() {
        return Err(Error::Nifti(
            "header has magic ni1 (separate .img file); use parse_nifti_pair".into(),
        ));
    }
    let offset = header.vox_offset as usize;
    if bytes.len() < offset {
        return Err(Error::Nifti(format!(
            "truncated: vox_offset {offset} beyond stream of {} bytes",
            bytes.len()
        )));
    }
    header.extension = bytes[HEADER_SIZE..offset].to_vec();
    let volume = decode_volume(&header, &bytes[offset..])?;
    Ok((header, volume))
}

/// Parses a two-file (`ni1`) NIfTI-1 dataset from its `.hdr` and `.img` bytes.
pub fn parse_nifti_pair(hdr: &[u8], img: &[u8]) -> Result<(NiftiHeader, Volume3D)> {
    let hdr_owned;
    let hdr = if is_gzip(hdr) {
        hdr_owned = gunzip(hdr)?;
        &hdr_owned[..]
    } else {
        hdr
    };
    let img_owned;
    let img = if is_gzip(img) {
        img_owned = gunzip(img)?;
        &img_owned[..]
    } else {
        img
    };
    let mut header = parse_header(hdr)?;
    header.validate()?;
    header.extension = hdr[HEADER_SIZE..].to_vec();
    let offset = header.vox_offset.max(0.0) as usize;
    if img.len() < offset {
        return Err(Error::Nifti("truncated: vox_offset beyond .img stream".into()));
    }
    let volume = decode_volume(&header, &img[offset..])?;
    Ok((header, volume))
}

fn decode_volume(header: &NiftiHeader, data: &[u8]) -> Result<Volume3D> {
    let dt = header.datatype()?;
    let shape = header.shape()?;
    let frame: usize = shape.iter().product();
    let needed = header.total_voxels()? * dt.bytes();
    if data.len() < needed {
        return Err(Error::Nifti(format!(
            "truncated data section: need {needed} bytes, have {}",
            data.len()
        )));
    }
    let big = header.endianness == Endianness::Big;
    let slope = header.scl_slope;
    let scale = slope != 0.0 && slope.is_finite();
    let inter = header.scl_inter;
    let data = &data[..frame * dt.bytes()];

    macro_rules! decode {
        ($t:ty, $n:expr) => {
            data.chunks_exact($n)
                .map(|c| {
                    let mut b: [u8; $n] = c.try_into().expect("chunk size");
                    if big {
                        b.reverse();
                    }
                    <$t>::from_le_bytes(b) as f64
                })
                .collect::<Vec<f64>>()
        };
    }
    let raw: Vec<f64> = match dt {
        Datatype::Uint8 => data.iter().map(|&v| v as f64).collect(),
        Datatype::Int16 => decode!(i16, 2),
        Datatype::Int32 => decode!(i32, 4),
        Datatype::Float32 => decode!(f32, 4),
        Datatype::Float64 => decode!(f64, 8),
    };
    let voxels: Vec<f32> = if scale && !(slope == 1.0 && inter == 0.0) {
        raw.iter()
            .map(|&v| (v * slope as f64 + inter as f64) as f32)
            .collect()
    } else {
        raw.iter().map(|&v| v as f32).collect()
    };
    Volume3D::new(shape, header.spacing(), resolve_affine(header), voxels)
}

fn encode_voxels(header: &NiftiHeader, volume: &Volume3D) -> Result<Vec<u8>> {
    let dt = header.datatype()?;
    let big = header.endianness == Endianness::Big;
    let slope = header.scl_slope as f64;
    let inter = header.scl_inter as f64;
    let unscale = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let mut out = Vec::with_capacity(volume.len() * dt.bytes());
    let mut push = |b: &mut [u8]| {
        if big {
            b.reverse();
        }
        out.extend_from_slice(b);
    };
    for &v in volume.voxels() {
        let raw = if unscale { (v as f64 - inter) / slope } else { v as f64 };
        match dt {
            Datatype::Uint8 => push(&mut [raw.round().clamp(0.0, 255.0) as u8]),
            Datatype::Int16 => push(&mut (raw.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes()),
            Datatype::Int32 => push(&mut (raw.round().clamp(i32::MIN as f64, i32::MAX as f64) as i32).to_le_bytes()),
            Datatype::Float32 => {
                let f = if unscale { raw as f32 } else { v };
                push(&mut f.to_le_bytes())
            }
            Datatype::Float64 => push(&mut raw.to_le_bytes()),
        }
    }
    Ok(out)
}

fn check_dims(header: &NiftiHeader, volume: &Volume3D) -> Result<()> {
    let shape = header.shape()?;
    if shape != volume.shape() || header.total_voxels()? != volume.len() {
        return Err(Error::Shape(format!(
            "header dims {:?} do not match volume shape {:?}",
            &header.dim[..=header.dim[0].clamp(0, 7) as usize],
            volume.shape()
        )));
    }
    Ok(())
}

/// Serializes a single-file NIfTI-1 stream (uncompressed).
///
/// The header is written as given. The extension region is padded with
/// zeros or truncated to fit `vox_offset`.
pub fn write_nifti(header: &NiftiHeader, volume: &Volume3D) -> Result<Vec<u8>> {
    header.validate()?;
    if !header.is_single_file() {
        return Err(Error::Nifti("write_nifti needs magic n+1; use write_nifti_pair".into()));
    }
    check_dims(header, volume)?;
    let offset = header.vox_offset as usize;
    let mut out = encode_header(header);
    let ext_len = offset - HEADER_SIZE;
    let mut ext = header.extension.clone();
    ext.resize(ext_len, 0);
    out.extend_from_slice(&ext);
    out.extend_from_slice(&encode_voxels(header, volume)?);
    Ok(out)
}

/// Serializes a two-file dataset as `(hdr bytes, img bytes)`.
pub fn write_nifti_pair(header: &NiftiHeader, volume: &Volume3D) -> Result<(Vec<u8>, Vec<u8>)> {
    header.validate()?;
    if header.is_single_file() {
        return Err(Error::Nifti("write_nifti_pair needs magic ni1".into()));
    }
    check_dims(header, volume)?;
    let mut hdr = encode_header(header);
    hdr.extend_from_slice(&header.extension);
    let mut img = vec![0u8; header.vox_offset.max(0.0) as usize];
    img.extend_from_slice(&encode_voxels(header, volume)?);
    Ok((hdr, img))
}

pub fn gzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes)
        .map_err(|e| Error::Nifti(format!("gzip encode failed: {e}")))?;
    enc.finish()
        .map_err(|e| Error::Nifti(format!("gzip encode failed: {e}")))
}

fn is_gz_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// Reads `.nii`, `.nii.gz`, or a `.hdr`/`.img` pair.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<(NiftiHeader, Volume3D)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.to_string_lossy();
    if name.ends_with(".hdr") || name.ends_with(".hdr.gz") {
        let img_path = std::path::PathBuf::from(name.replacen(".hdr", ".img", 1));
        let img = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        return parse_nifti_pair(&bytes, &img).map_err(|e| Error::parse(path.display(), e.to_string()));
    }
    parse_nifti(&bytes).map_err(|e| Error::parse(path.display(), e.to_string()))
}

/// Writes a single-file NIfTI, gzip-compressed when the path ends in `.gz`.
pub fn write_nifti_file(path: impl AsRef<Path>, header: &NiftiHeader, volume: &Volume3D) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = write_nifti(header, volume)?;
    if is_gz_path(path) {
        bytes = gzip(&bytes)?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Convenience: float32 file whose sform is the volume's affine.
pub fn save_volume(path: impl AsRef<Path>, volume: &Volume3D) -> Result<()> {
    write_nifti_file(path, &NiftiHeader::for_volume(volume, Datatype::Float32), volume)
}

/// Voxel-to-world affine from sform, else qform, else pixdim scaling.
pub fn resolve_affine(h: &NiftiHeader) -> Affine4x4 {
    let spacing = h.spacing();
    let fallback = Affine4x4::diagonal(spacing, [0.0; 3]);
    if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z].map(|r| r.map(|v| v as f64));
        return Affine4x4::from_rows(rows).unwrap_or_else(|_| {
            log::warn!("singular sform; falling back to pixdim scaling");
            fallback
        });
    }
    if h.qform_code > 0 {
        let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ];
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [spacing[0], spacing[1], spacing[2] * qfac];
        let t = [h.qoffset_x as f64, h.qoffset_y as f64, h.qoffset_z as f64];
        let mut rows = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rows[i][j] = r[i][j] * scale[j];
            }
            rows[i][3] = t[i];
        }
        return Affine4x4::from_rows(rows).unwrap_or(fallback);
    }
    fallback
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (NiftiHeader, Volume3D) {
        let v = Volume3D::with_spacing([2, 2, 2], [1.0; 3], [0.0; 3], (0..8).map(|i| i as f32 + 0.25).collect())
            .unwrap();
        (NiftiHeader::for_volume(&v, Datatype::Float32), v)
    }

    #[test]
    fn minimal_float32_file() {
        let (h, v) = tiny();
        let bytes = write_nifti(&h, &v).unwrap();
        assert_eq!(bytes.len(), 352 + 32);
        let (h2, v2) = parse_nifti(&bytes).unwrap();
        assert_eq!(v2.voxels(), v.voxels());
        assert_eq!(v2.spacing(), [1.0; 3]);
        assert_eq!(*v2.affine(), Affine4x4::identity());
        assert_eq!(h2, h);
    }

    #[test]
    fn gzip_is_transparent() {
        let (h, v) = tiny();
        let bytes = write_nifti(&h, &v).unwrap();
        let gz = gzip(&bytes).unwrap();
        assert_eq!(parse_nifti(&gz).unwrap(), parse_nifti(&bytes).unwrap());
    }

    #[test]
    fn int16_scaling() {
        let v = Volume3D::with_spacing([1, 1, 1], [1.0; 3], [0.0; 3], vec![7.0]).unwrap();
        let mut h = NiftiHeader::for_volume(&v, Datatype::Int16);
        h.scl_slope = 2.0;
        h.scl_inter = 1.0;
        let bytes = write_nifti(&h, &v).unwrap();
        assert_eq!(&bytes[352..], &3i16.to_le_bytes());
        assert_eq!(parse_nifti(&bytes).unwrap().1.voxels(), &[7.0]);
    }

    #[test]
    fn big_endian_twin_parses_identically() {
        let (mut h, v) = tiny();
        let le = write_nifti(&h, &v).unwrap();
        h.endianness = Endianness::Big;
        let be = write_nifti(&h, &v).unwrap();
        assert_ne!(le, be);
        let (hb, vb) = parse_nifti(&be).unwrap();
        assert_eq!(hb.endianness, Endianness::Big);
        assert_eq!(vb, parse_nifti(&le).unwrap().1);
    }

    #[test]
    fn errors() {
        let (h, v) = tiny();
        let good = write_nifti(&h, &v).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[344..348].copy_from_slice(b"xyz\0");
        assert!(parse_nifti(&bad_magic).is_err());

        let mut bad_dt = good.clone();
        bad_dt[70..72].copy_from_slice(&256i16.to_le_bytes());
        assert!(matches!(parse_nifti(&bad_dt), Err(Error::UnsupportedDatatype(256))));

        assert!(parse_nifti(&good[..good.len() - 1]).is_err());

        let mut bad_dim = good.clone();
        bad_dim[40..42].copy_from_slice(&8i16.to_le_bytes());
        assert!(parse_nifti(&bad_dim).is_err());

        let other = Volume3D::with_spacing([2, 2, 3], [1.0; 3], [0.0; 3], vec![0.0; 12]).unwrap();
        assert!(matches!(write_nifti(&h, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn extension_bytes_survive() {
        let (mut h, v) = tiny();
        h.vox_offset = 368.0;
        h.extension = vec![1, 0, 0, 0, 16, 0, 0, 0, 4, 0, 0, 0, 0xde, 0xad, 0xbe, 0xef, 0, 0, 0, 0];
        h.extension.truncate(20);
        let bytes = write_nifti(&h, &v).unwrap();
        let (h2, v2) = parse_nifti(&bytes).unwrap();
        assert_eq!(h2.extension, h.extension);
        assert_eq!(v2.voxels(), v.voxels());
    }

    #[test]
    fn pair_round_trip() {
        let (mut h, v) = tiny();
        h.magic = PAIR_MAGIC;
        h.vox_offset = 0.0;
        h.extension = vec![0; 4];
        let (hdr, img) = write_nifti_pair(&h, &v).unwrap();
        let (h2, v2) = parse_nifti_pair(&hdr, &img).unwrap();
        assert_eq!(h2, h);
        assert_eq!(v2.voxels(), v.voxels());
    }

    #[test]
    fn null_quaternion_is_identity() {
        let h = NiftiHeader {
            qform_code: 1,
            sform_code: 0,
            ..Default::default()
        };
        assert_eq!(resolve_affine(&h), Affine4x4::identity());
    }

    #[test]
    fn sform_wins_over_qform() {
        let h = NiftiHeader {
            qform_code: 1,
            sform_code: 1,
            srow_x: [2.0, 0.0, 0.0, 5.0],
            qoffset_x: -7.0,
            ..Default::default()
        };
        let a = resolve_affine(&h);
        assert_eq!(a.rows()[0], [2.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn quaternion_rotation_about_z() {
        let s = (std::f64::consts::FRAC_PI_4).sin() as f32;
        let h = NiftiHeader {
            qform_code: 1,
            sform_code: 0,
            quatern_d: s,
            ..Default::default()
        };
        let p = resolve_affine(&h).apply([1.0, 0.0, 0.0]);
        assert!(p[0].abs() < 1e-6 && (p[1] - 1.0).abs() < 1e-6 && p[2].abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn negative_qfac_flips_third_axis() {
        let mut h = NiftiHeader {
            qform_code: 1,
            sform_code: 0,
            ..Default::default()
        };
        h.pixdim[0] = -1.0;
        h.pixdim[3] = 2.0;
        assert_eq!(resolve_affine(&h).apply([0.0, 0.0, 1.0]), [0.0, 0.0, -2.0]);
    }

    #[test]
    fn no_codes_means_pixdim_scaling() {
        let mut h = NiftiHeader::default();
        h.pixdim[1] = 0.5;
        h.pixdim[2] = 0.6;
        h.pixdim[3] = 0.7;
        let a = resolve_affine(&h);
        assert_eq!(a.apply([1.0, 1.0, 1.0]).map(|v| (v * 10.0).round() / 10.0), [0.5, 0.6, 0.7]);
        assert_eq!(a.to_matrix()[3], [0.0, 0.0, 0.0, 1.0]);
    }
}
