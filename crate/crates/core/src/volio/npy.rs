//! NPY v1.0 reader/writer for C-contiguous little-endian float32 and uint8 arrays.

use std::path::Path;

use crate::error::{Error, NpyError, Result};
use crate::volcore::ChannelStack;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl NpyData {
    fn descr(&self) -> &'static str {
        match self {
            NpyData::F32(_) => "<f4",
            NpyData::U8(_) => "|u1",
        }
    }

    fn len(&self) -> usize {
        match self {
            NpyData::F32(d) => d.len(),
            NpyData::U8(d) => d.len(),
        }
    }
}

/// An n-dimensional C-order array.
#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: NpyData) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("NPY arrays must have rank >= 1".into()));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "NPY shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Converts an x-fastest stack into a C-order `(C, X, Y, Z)` float array.
    pub fn from_stack(stack: &ChannelStack) -> Self {
        let [nx, ny, nz] = stack.shape;
        let mut out = Vec::with_capacity(stack.data.len());
        for c in 0..stack.channels {
            let ch = stack.channel(c);
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        out.push(ch[x + nx * (y + ny * z)]);
                    }
                }
            }
        }
        Self {
            shape: vec![stack.channels, nx, ny, nz],
            data: NpyData::F32(out),
        }
    }

    /// C-order `(C, X, Y, Z)` uint8 array from x-fastest channel bytes.
    pub fn from_channel_bytes(channels: usize, shape: [usize; 3], bytes: &[u8]) -> Self {
        let [nx, ny, nz] = shape;
        let n = nx * ny * nz;
        let mut out = Vec::with_capacity(bytes.len());
        for c in 0..channels {
            let ch = &bytes[c * n..(c + 1) * n];
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        out.push(ch[x + nx * (y + ny * z)]);
                    }
                }
            }
        }
        Self {
            shape: vec![channels, nx, ny, nz],
            data: NpyData::U8(out),
        }
    }

    fn four_d(&self) -> Result<(usize, [usize; 3])> {
        match self.shape[..] {
            [c, x, y, z] => Ok((c, [x, y, z])),
            _ => Err(Error::Shape(format!(
                "expected a (C, X, Y, Z) array, got shape {:?}",
                self.shape
            ))),
        }
    }

    fn c_order_to_x_fastest<T: Copy + Default>(src: &[T], c: usize, shape: [usize; 3]) -> Vec<T> {
        let [nx, ny, nz] = shape;
        let n = nx * ny * nz;
        let mut out = vec![T::default(); src.len()];
        for ch in 0..c {
            let mut i = ch * n;
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        out[ch * n + x + nx * (y + ny * z)] = src[i];
                        i += 1;
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`NpyArray::from_stack`].
    pub fn to_stack(&self) -> Result<ChannelStack> {
        let (c, shape) = self.four_d()?;
        match &self.data {
            NpyData::F32(d) => ChannelStack::from_vec(c, shape, Self::c_order_to_x_fastest(d, c, shape)),
            NpyData::U8(_) => Err(Error::Shape("expected float32 array, found uint8".into())),
        }
    }

    /// Inverse of [`NpyArray::from_channel_bytes`].
    pub fn to_channel_bytes(&self) -> Result<(usize, [usize; 3], Vec<u8>)> {
        let (c, shape) = self.four_d()?;
        match &self.data {
            NpyData::U8(d) => Ok((c, shape, Self::c_order_to_x_fastest(d, c, shape))),
            NpyData::F32(_) => Err(Error::Shape("expected uint8 array, found float32".into())),
        }
    }
}

fn header_dict(arr: &NpyArray) -> String {
    let shape = match arr.shape.len() {
        1 => format!("({},)", arr.shape[0]),
        _ => format!(
            "({})",
            arr.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}}}",
        arr.data.descr(),
        shape
    )
}

pub fn encode_npy(arr: &NpyArray) -> Vec<u8> {
    let mut dict = header_dict(arr);
    // magic(6) + version(2) + header_len(2) + dict + '\n' is a multiple of 64
    let unpadded = MAGIC.len() + 4 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat(' ').take(pad));
    dict.push('\n');
    let mut out = Vec::with_capacity(10 + dict.len() + arr.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    match &arr.data {
        NpyData::F32(d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        NpyData::U8(d) => out.extend_from_slice(d),
    }
    out
}

/// Value of `key` in a Python dict literal, as raw text.
fn dict_value<'a>(dict: &'a str, key: &str) -> std::result::Result<&'a str, NpyError> {
    let pat = format!("'{key}'");
    let start = dict
        .find(&pat)
        .ok_or_else(|| NpyError::MalformedHeader(format!("missing key {key}")))?;
    let rest = dict[start + pat.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| NpyError::MalformedHeader(format!("no ':' after {key}")))?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else if let Some(q) = rest.strip_prefix('\'') {
        q.find('\'').map(|i| i + 2)
    } else {
        rest.find([',', '}'])
    }
    .ok_or_else(|| NpyError::MalformedHeader(format!("unterminated value for {key}")))?;
    Ok(rest[..end].trim())
}

fn parse_shape(text: &str) -> std::result::Result<Vec<usize>, NpyError> {
    let inner = text
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| NpyError::MalformedHeader(format!("bad shape {text}")))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| NpyError::MalformedHeader(format!("bad dimension {s}")))
        })
        .collect()
}

pub fn decode_npy(bytes: &[u8]) -> std::result::Result<NpyArray, NpyError> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    if (bytes[6], bytes[7]) != (1, 0) {
        return Err(NpyError::UnsupportedVersion(bytes[6], bytes[7]));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + hlen {
        return Err(NpyError::Truncated {
            needed: 10 + hlen,
            available: bytes.len(),
        });
    }
    let dict = std::str::from_utf8(&bytes[10..10 + hlen])
        .map_err(|_| NpyError::MalformedHeader("header is not ASCII".into()))?;
    match dict_value(dict, "fortran_order")? {
        "False" => {}
        "True" => return Err(NpyError::FortranOrder),
        other => return Err(NpyError::MalformedHeader(format!("fortran_order = {other}"))),
    }
    let descr = dict_value(dict, "descr")?.trim_matches('\'');
    let shape = parse_shape(dict_value(dict, "shape")?)?;
    if shape.is_empty() {
        return Err(NpyError::ScalarArray);
    }
    let n: usize = shape.iter().product();
    let payload = &bytes[10 + hlen..];
    let width = match descr {
        "<f4" => 4,
        "|u1" | "<u1" => 1,
        other => return Err(NpyError::UnsupportedDescr(other.to_string())),
    };
    if payload.len() < n * width {
        return Err(NpyError::Truncated {
            needed: 10 + hlen + n * width,
            available: bytes.len(),
        });
    }
    let data = if width == 4 {
        NpyData::F32(
            payload[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        NpyData::U8(payload[..n].to_vec())
    };
    Ok(NpyArray { shape, data })
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_npy(&bytes).map_err(|source| Error::Npy {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_npy(arr: &NpyArray, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_npy(arr)).map_err(|e| Error::io(path, e))
}
