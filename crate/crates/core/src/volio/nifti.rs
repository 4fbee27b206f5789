//! Little-endian NIfTI-1 subset: 3D grids stored as uint8, int16 or float32,
//! optionally gzip-compressed. Orientation fields are carried through verbatim.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, NiftiError, Result};
use crate::volcore::{Geometry, Grid, LabelMap, Orientation, Volume3};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const REGULAR: usize = 38;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const SROW_X: usize = 280;
    pub const SROW_Y: usize = 296;
    pub const SROW_Z: usize = 312;
    pub const MAGIC: usize = 344;
}

#[derive(Clone, Debug, PartialEq)]
pub enum NiftiData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl NiftiData {
    fn datatype(&self) -> (i16, i16) {
        match self {
            NiftiData::U8(_) => (DT_UINT8, 8),
            NiftiData::I16(_) => (DT_INT16, 16),
            NiftiData::F32(_) => (DT_FLOAT32, 32),
        }
    }
}

/// Decoded NIfTI file: geometry plus raw voxel payload.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub geometry: Geometry,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub data: NiftiData,
}

impl NiftiImage {
    /// Payload widened to f32 with `scl_slope`/`scl_inter` applied when they are not the identity.
    pub fn to_f32(&self) -> Vec<f32> {
        let scale = self.scl_slope != 0.0 && (self.scl_slope != 1.0 || self.scl_inter != 0.0);
        let f = |v: f32| {
            if scale {
                v * self.scl_slope + self.scl_inter
            } else {
                v
            }
        };
        match &self.data {
            NiftiData::U8(d) => d.iter().map(|&v| f(v as f32)).collect(),
            NiftiData::I16(d) => d.iter().map(|&v| f(v as f32)).collect(),
            NiftiData::F32(d) => d.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32s_at<const N: usize>(b: &[u8], off: usize) -> [f32; N] {
    std::array::from_fn(|i| f32_at(b, off + 4 * i))
}

/// Parses an uncompressed or gzip-compressed NIfTI-1 byte stream.
pub fn decode_nifti(raw: &[u8]) -> std::result::Result<NiftiImage, NiftiError> {
    let inflated;
    let bytes = if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw)
            .read_to_end(&mut out)
            .map_err(|_| NiftiError::Truncated {
                needed: HEADER_SIZE,
                available: out.len(),
            })?;
        inflated = out;
        &inflated[..]
    } else {
        raw
    };
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            needed: HEADER_SIZE,
            available: bytes.len(),
        });
    }
    let sizeof_hdr = i32_at(bytes, offsets::SIZEOF_HDR);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(NiftiError::BadHeaderSize(sizeof_hdr));
    }
    let magic: [u8; 4] = bytes[offsets::MAGIC..offsets::MAGIC + 4].try_into().unwrap();
    if &magic != b"n+1\0" {
        return Err(NiftiError::BadMagic(magic));
    }
    let dim: [i16; 8] = std::array::from_fn(|i| i16_at(bytes, offsets::DIM + 2 * i));
    let dims_ok = match dim[0] {
        3 => true,
        4 => dim[4] == 1,
        _ => false,
    } && dim[1..4].iter().all(|&d| d >= 1);
    if !dims_ok {
        return Err(NiftiError::UnsupportedDims(dim));
    }
    let datatype = i16_at(bytes, offsets::DATATYPE);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let pixdim: [f32; 8] = f32s_at(bytes, offsets::PIXDIM);
    let spacing = [pixdim[1], pixdim[2], pixdim[3]];
    let shape = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let geometry = Geometry::new(shape, spacing).map_err(|_| NiftiError::BadSpacing(spacing))?;
    let vox_offset = f32_at(bytes, offsets::VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(NiftiError::BadVoxOffset(vox_offset));
    }
    let start = vox_offset as usize;
    let n = geometry.len();
    let needed = start + n * width;
    if bytes.len() < needed {
        return Err(NiftiError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let payload = &bytes[start..needed];
    let data = match datatype {
        DT_UINT8 => NiftiData::U8(payload.to_vec()),
        DT_INT16 => NiftiData::I16(
            payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
        _ => NiftiData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    let orientation = Orientation {
        qform_code: i16_at(bytes, offsets::QFORM_CODE),
        sform_code: i16_at(bytes, offsets::SFORM_CODE),
        qfac: pixdim[0],
        quatern: f32s_at(bytes, offsets::QUATERN_B),
        srow_x: f32s_at(bytes, offsets::SROW_X),
        srow_y: f32s_at(bytes, offsets::SROW_Y),
        srow_z: f32s_at(bytes, offsets::SROW_Z),
        xyzt_units: bytes[offsets::XYZT_UNITS],
    };
    Ok(NiftiImage {
        geometry: geometry.with_orientation(Some(orientation)),
        scl_slope: f32_at(bytes, offsets::SCL_SLOPE),
        scl_inter: f32_at(bytes, offsets::SCL_INTER),
        data,
    })
}

/// Serializes a grid as NIfTI-1 with `vox_offset = 352`, `scl_slope = 1`, `scl_inter = 0`.
pub fn encode_nifti(geometry: &Geometry, data: &NiftiData) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[offsets::REGULAR] = b'r';
    let dims = [
        3i16,
        geometry.shape[0] as i16,
        geometry.shape[1] as i16,
        geometry.shape[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dims.iter().enumerate() {
        put_i16(&mut h, offsets::DIM + 2 * i, *d);
    }
    let (code, bitpix) = data.datatype();
    put_i16(&mut h, offsets::DATATYPE, code);
    put_i16(&mut h, offsets::BITPIX, bitpix);

    let default_orientation = Orientation {
        qform_code: 0,
        sform_code: 0,
        qfac: 1.0,
        quatern: [0.0; 6],
        srow_x: [geometry.spacing[0], 0.0, 0.0, 0.0],
        srow_y: [0.0, geometry.spacing[1], 0.0, 0.0],
        srow_z: [0.0, 0.0, geometry.spacing[2], 0.0],
        xyzt_units: 2,
    };
    let o = geometry.orientation.as_ref().unwrap_or(&default_orientation);
    let pixdim = [
        o.qfac,
        geometry.spacing[0],
        geometry.spacing[1],
        geometry.spacing[2],
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, offsets::PIXDIM + 4 * i, *p);
    }
    put_f32(&mut h, offsets::VOX_OFFSET, VOX_OFFSET as f32);
    put_f32(&mut h, offsets::SCL_SLOPE, 1.0);
    put_f32(&mut h, offsets::SCL_INTER, 0.0);
    h[offsets::XYZT_UNITS] = o.xyzt_units;
    put_i16(&mut h, offsets::QFORM_CODE, o.qform_code);
    put_i16(&mut h, offsets::SFORM_CODE, o.sform_code);
    for (i, q) in o.quatern.iter().enumerate() {
        put_f32(&mut h, offsets::QUATERN_B + 4 * i, *q);
    }
    for (row, off) in [(&o.srow_x, offsets::SROW_X), (&o.srow_y, offsets::SROW_Y), (&o.srow_z, offsets::SROW_Z)] {
        for (i, v) in row.iter().enumerate() {
            put_f32(&mut h, off + 4 * i, *v);
        }
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
    // bytes 348..352: extension flag, all zero

    match data {
        NiftiData::U8(d) => h.extend_from_slice(d),
        NiftiData::I16(d) => d.iter().for_each(|v| h.extend_from_slice(&v.to_le_bytes())),
        NiftiData::F32(d) => d.iter().for_each(|v| h.extend_from_slice(&v.to_le_bytes())),
    }
    h
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).expect("in-memory write");
    enc.finish().expect("in-memory write")
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti(&raw).map_err(|source| Error::Nifti {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads any supported datatype as a float volume.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let img = read_nifti(path)?;
    let data = img.to_f32();
    Volume3::from_vec(img.geometry, data)
}

/// Reads a uint8 label file.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let img = read_nifti(path)?;
    match img.data {
        NiftiData::U8(d) => LabelMap::new(Grid::from_vec(img.geometry, d)?),
        other => Err(Error::Nifti {
            path: path.to_path_buf(),
            source: NiftiError::NotLabelData(other.datatype().0),
        }),
    }
}

fn write_bytes(path: &Path, bytes: Vec<u8>, compress: bool) -> Result<()> {
    let out = if compress { gzip(&bytes) } else { bytes };
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_volume(vol: &Volume3, path: impl AsRef<Path>, compress: bool) -> Result<()> {
    let bytes = encode_nifti(vol.geometry(), &NiftiData::F32(vol.data().to_vec()));
    write_bytes(path.as_ref(), bytes, compress)
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>, compress: bool) -> Result<()> {
    let bytes = encode_nifti(labels.geometry(), &NiftiData::U8(labels.data().to_vec()));
    write_bytes(path.as_ref(), bytes, compress)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(shape: [usize; 3]) -> Volume3 {
        let g = Geometry::new(shape, [1.0, 0.5, 2.0]).unwrap();
        let data = (0..g.len()).map(|i| (i as f32 * 0.37).sin() * 100.0).collect();
        Volume3::from_vec(g, data).unwrap()
    }

    #[test]
    fn header_layout() {
        let v = sample([3, 4, 5]);
        let b = encode_nifti(v.geometry(), &NiftiData::F32(v.data().to_vec()));
        assert_eq!(b.len(), 352 + 60 * 4);
        assert_eq!(i32_at(&b, 0), 348);
        assert_eq!(&b[344..348], b"n+1\0");
        assert_eq!(f32_at(&b, 108), 352.0);
        assert_eq!(f32_at(&b, 112), 1.0);
        assert_eq!(f32_at(&b, 116), 0.0);
        assert_eq!(i16_at(&b, 70), DT_FLOAT32);
        assert_eq!(f32s_at::<3>(&b, 80), [1.0, 0.5, 2.0]);
        assert_eq!(&b[348..352], &[0; 4]);
    }

    #[test]
    fn isotropic_spacing_lands_in_pixdim() {
        let g = Geometry::isotropic([2, 2, 2]).unwrap();
        let b = encode_nifti(&g, &NiftiData::U8(vec![0; 8]));
        assert_eq!(f32s_at::<3>(&b, offsets::PIXDIM + 4), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn float64_rejected() {
        let v = sample([2, 2, 2]);
        let mut b = encode_nifti(v.geometry(), &NiftiData::F32(v.data().to_vec()));
        b[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(decode_nifti(&b), Err(NiftiError::UnsupportedDatatype(64))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let v = sample([2, 2, 2]);
        let b = encode_nifti(v.geometry(), &NiftiData::F32(v.data().to_vec()));
        let mut bad = b.clone();
        bad[344] = b'x';
        assert!(matches!(decode_nifti(&bad), Err(NiftiError::BadMagic(_))));
        assert!(matches!(
            decode_nifti(&b[..b.len() - 1]),
            Err(NiftiError::Truncated { .. })
        ));
        assert!(matches!(decode_nifti(&b[..100]), Err(NiftiError::Truncated { .. })));
    }

    #[test]
    fn dims_checked() {
        let v = sample([2, 2, 2]);
        let mut b = encode_nifti(v.geometry(), &NiftiData::F32(v.data().to_vec()));
        b[40..42].copy_from_slice(&4i16.to_le_bytes());
        b[48..50].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(decode_nifti(&b), Err(NiftiError::UnsupportedDims(_))));
        // 4D with a single frame is accepted
        b[48..50].copy_from_slice(&1i16.to_le_bytes());
        assert!(decode_nifti(&b).is_ok());
        b[40..42].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(decode_nifti(&b), Err(NiftiError::UnsupportedDims(_))));
    }

    #[test]
    fn int16_widened_with_scaling() {
        let g = Geometry::isotropic([2, 1, 1]).unwrap();
        let mut b = encode_nifti(&g, &NiftiData::I16(vec![-3, 7]));
        b[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        b[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(decode_nifti(&b).unwrap().to_f32(), vec![-5.0, 15.0]);
    }

    #[test]
    fn float_round_trip_bit_exact_with_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample([7, 5, 3]);
        for (name, gz) in [("a.nii", false), ("a.nii.gz", true)] {
            let p = dir.path().join(name);
            write_volume(&v, &p, gz).unwrap();
            let r = read_volume(&p).unwrap();
            assert_eq!(r.shape(), v.shape());
            assert_eq!(r.spacing(), v.spacing());
            let bits = |d: &[f32]| d.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(r.data()), bits(v.data()));
        }
    }

    #[test]
    fn gzip_stream_decodes_to_plain_bytes() {
        let v = sample([4, 4, 4]);
        let plain = encode_nifti(v.geometry(), &NiftiData::F32(v.data().to_vec()));
        let gz = gzip(&plain);
        assert_eq!(&gz[..2], &GZIP_MAGIC);
        let mut out = Vec::new();
        GzDecoder::new(&gz[..]).read_to_end(&mut out).unwrap();
        assert_eq!(out, plain);
    }

    #[test]
    fn orientation_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = sample([2, 3, 4]);
        let o = Orientation {
            qform_code: 1,
            sform_code: 2,
            qfac: -1.0,
            quatern: [0.0, 1.0, 0.0, -90.0, 126.0, -72.0],
            srow_x: [-1.0, 0.0, 0.0, 90.0],
            srow_y: [0.0, 1.0, 0.0, -126.0],
            srow_z: [0.0, 0.0, 1.0, -72.0],
            xyzt_units: 10,
        };
        v.set_orientation(Some(o.clone()));
        let p = dir.path().join("o.nii");
        write_volume(&v, &p, false).unwrap();
        assert_eq!(read_volume(&p).unwrap().geometry().orientation, Some(o));
    }

    #[test]
    fn labels_require_uint8() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.nii");
        write_volume(&sample([2, 2, 2]), &p, false).unwrap();
        assert!(matches!(
            read_labels(&p),
            Err(Error::Nifti {
                source: NiftiError::NotLabelData(DT_FLOAT32),
                ..
            })
        ));
    }
}
