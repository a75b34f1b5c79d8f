//! NPY (NumPy array container) v1.0/v2.0 reading and v1.0 writing.
//!
//! Little-endian `<f8`, `<f4`, `<i4`, and `|u1` payloads only. Files written
//! here follow the reference layout: the magic/version/length preamble plus
//! the space-padded header dict always total a multiple of 64 bytes, so data
//! starts aligned. Fortran-ordered inputs are accepted on read and transposed
//! into row-major layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const HEADER_ALIGN: usize = 64;

/// Scalar types that can live in an NPY payload.
pub trait Element: Copy {
    /// numpy type descriptor, e.g. `"<f8"`.
    const DESCR: &'static str;
    const SIZE: usize;
    fn write_le(values: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Vec<Self>;
}

macro_rules! impl_element {
    ($ty:ty, $descr:expr, $size:expr) => {
        impl Element for $ty {
            const DESCR: &'static str = $descr;
            const SIZE: usize = $size;

            fn write_le(values: &[Self], out: &mut Vec<u8>) {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }

            fn read_le(bytes: &[u8]) -> Vec<Self> {
                bytes
                    .chunks_exact($size)
                    .map(|c| <$ty>::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
        }
    };
}

impl_element!(f64, "<f8", 8);
impl_element!(f32, "<f4", 4);
impl_element!(i32, "<i4", 4);
impl_element!(u8, "|u1", 1);

/// A tensor of any supported payload dtype, as found in a file.
#[derive(Clone, Debug, PartialEq)]
pub enum NpyArray {
    F64(Tensor<f64>),
    F32(Tensor<f32>),
    I32(Tensor<i32>),
    U8(Tensor<u8>),
}

impl NpyArray {
    pub fn shape(&self) -> &[usize] {
        match self {
            NpyArray::F64(t) => t.shape(),
            NpyArray::F32(t) => t.shape(),
            NpyArray::I32(t) => t.shape(),
            NpyArray::U8(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            NpyArray::F64(_) => f64::DESCR,
            NpyArray::F32(_) => f32::DESCR,
            NpyArray::I32(_) => i32::DESCR,
            NpyArray::U8(_) => u8::DESCR,
        }
    }

    /// Canonical compute view: float64, upcasting float32/int/uint payloads.
    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            NpyArray::F64(t) => t.clone(),
            NpyArray::F32(t) => t.to_f64(),
            NpyArray::I32(t) => t.map(|x| x as f64),
            NpyArray::U8(t) => t.map(|x| x as f64),
        }
    }

    /// Integer view for mask payloads; floats are rejected.
    pub fn to_i32(&self) -> Result<Tensor<i32>> {
        match self {
            NpyArray::I32(t) => Ok(t.clone()),
            NpyArray::U8(t) => Ok(t.map(|x| x as i32)),
            other => Err(Error::UnsupportedDtype(format!(
                "expected an integer payload, found {}",
                other.dtype()
            ))),
        }
    }

    /// Binary (0/1) view for boundary masks.
    pub fn to_binary(&self) -> Result<Tensor<u8>> {
        let ints = self.to_i32()?;
        if ints.data().iter().any(|&v| v != 0 && v != 1) {
            return Err(Error::validation("mask", "binary mask values must be 0 or 1"));
        }
        Ok(ints.map(|x| x as u8))
    }
}

struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

fn format_error(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_header(text: &str) -> Result<Header> {
    let descr = extract_quoted(text, "descr")?;
    let fortran = extract_bool(text, "fortran_order")?;
    let shape = extract_shape(text)?;
    Ok(Header {
        descr,
        fortran_order: fortran,
        shape,
    })
}

fn find_key(text: &str, key: &str) -> Result<usize> {
    let quoted = format!("'{}'", key);
    let pos = text
        .find(&quoted)
        .ok_or_else(|| format_error(format!("header missing key {}", quoted)))?;
    let rest = &text[pos + quoted.len()..];
    let colon = rest
        .find(':')
        .ok_or_else(|| format_error(format!("no value for key {}", quoted)))?;
    Ok(pos + quoted.len() + colon + 1)
}

fn extract_quoted(text: &str, key: &str) -> Result<String> {
    let start = find_key(text, key)?;
    let rest = text[start..].trim_start();
    let mut chars = rest.chars();
    if chars.next() != Some('\'') {
        return Err(format_error(format!("value of '{}' is not a string", key)));
    }
    let inner: String = chars.take_while(|&c| c != '\'').collect();
    Ok(inner)
}

fn extract_bool(text: &str, key: &str) -> Result<bool> {
    let start = find_key(text, key)?;
    let rest = text[start..].trim_start();
    if rest.starts_with("True") {
        Ok(true)
    } else if rest.starts_with("False") {
        Ok(false)
    } else {
        Err(format_error(format!("value of '{}' is not a boolean", key)))
    }
}

fn extract_shape(text: &str) -> Result<Vec<usize>> {
    let start = find_key(text, "shape")?;
    let rest = text[start..].trim_start();
    if !rest.starts_with('(') {
        return Err(format_error("shape is not a tuple"));
    }
    let close = rest
        .find(')')
        .ok_or_else(|| format_error("unterminated shape tuple"))?;
    let inner = &rest[1..close];
    let mut dims = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let dim: usize = part
            .parse()
            .map_err(|_| format_error(format!("bad shape dimension '{}'", part)))?;
        dims.push(dim);
    }
    Ok(dims)
}

fn read_exact_or_format<R: Read>(reader: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|_| format_error(format!("truncated file while reading {}", what)))
}

/// Reads an NPY array from a reader positioned at the start of the container.
pub fn read_array<R: Read>(reader: &mut R) -> Result<NpyArray> {
    let mut magic = [0u8; 6];
    read_exact_or_format(reader, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(format_error("bad magic, not an NPY file"));
    }
    let mut version = [0u8; 2];
    read_exact_or_format(reader, &mut version, "version")?;
    let header_len = match version {
        [1, 0] => {
            let mut len = [0u8; 2];
            read_exact_or_format(reader, &mut len, "header length")?;
            u16::from_le_bytes(len) as usize
        }
        [2, 0] => {
            let mut len = [0u8; 4];
            read_exact_or_format(reader, &mut len, "header length")?;
            u32::from_le_bytes(len) as usize
        }
        [major, minor] => {
            return Err(format_error(format!(
                "unsupported NPY version {}.{}",
                major, minor
            )))
        }
    };
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or_format(reader, &mut header_bytes, "header")?;
    let header_text = std::str::from_utf8(&header_bytes)
        .map_err(|_| format_error("header is not valid text"))?;
    let header = parse_header(header_text)?;

    let count: usize = header.shape.iter().product();
    match header.descr.as_str() {
        "<f8" | "=f8" => read_payload::<f64, R>(reader, header, count).map(NpyArray::F64),
        "<f4" | "=f4" => read_payload::<f32, R>(reader, header, count).map(NpyArray::F32),
        "<i4" | "=i4" => read_payload::<i32, R>(reader, header, count).map(NpyArray::I32),
        "|u1" | "<u1" | "=u1" => read_payload::<u8, R>(reader, header, count).map(NpyArray::U8),
        other => Err(Error::UnsupportedDtype(other.to_string())),
    }
}

fn read_payload<T: Element, R: Read>(
    reader: &mut R,
    header: Header,
    count: usize,
) -> Result<Tensor<T>> {
    let mut raw = vec![0u8; count * T::SIZE];
    read_exact_or_format(reader, &mut raw, "array data")?;
    let values = T::read_le(&raw);
    let values = if header.fortran_order {
        fortran_to_row_major(&header.shape, values)
    } else {
        values
    };
    Tensor::new(header.shape, values)
}

/// Reorders a column-major element stream into row-major layout.
fn fortran_to_row_major<T: Copy>(shape: &[usize], data: Vec<T>) -> Vec<T> {
    if data.is_empty() || shape.len() < 2 {
        return data;
    }
    let ndim = shape.len();
    let mut out = data.clone();
    let mut index = vec![0usize; ndim];
    for value in data {
        let mut offset = 0;
        for (k, &ix) in index.iter().enumerate() {
            offset = offset * shape[k] + ix;
        }
        out[offset] = value;
        // Fortran order advances the first axis fastest.
        for k in 0..ndim {
            index[k] += 1;
            if index[k] < shape[k] {
                break;
            }
            index[k] = 0;
        }
    }
    out
}

/// Writes a tensor as NPY v1.0 with row-major data.
pub fn write_array<T: Element, W: Write>(writer: &mut W, tensor: &Tensor<T>) -> Result<()> {
    let shape_str = match tensor.shape().len() {
        0 => "()".to_string(),
        1 => format!("({},)", tensor.shape()[0]),
        _ => format!(
            "({})",
            tensor
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        T::DESCR,
        shape_str
    );
    // magic + version + u16 length + dict + padding + '\n', padded to 64.
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let total = unpadded.div_ceil(HEADER_ALIGN) * HEADER_ALIGN;
    let header_len = total - MAGIC.len() - 2 - 2;
    if header_len > u16::MAX as usize {
        return Err(format_error("header too large for NPY v1.0"));
    }

    writer.write_all(MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(header_len as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())?;
    for _ in 0..(header_len - dict.len() - 1) {
        writer.write_all(b" ")?;
    }
    writer.write_all(b"\n")?;

    let mut raw = Vec::with_capacity(tensor.len() * T::SIZE);
    T::write_le(tensor.data(), &mut raw);
    writer.write_all(&raw)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<NpyArray> {
    let file = File::open(path.as_ref())?;
    let mut reader = BufReader::new(file);
    read_array(&mut reader)
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    write_array(&mut writer, tensor)?;
    writer.flush()?;
    Ok(())
}

/// Serializes to an in-memory buffer; used by tests and the bank bundle.
pub fn to_bytes<T: Element>(tensor: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_array(&mut out, tensor)?;
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<NpyArray> {
    let mut cursor = std::io::Cursor::new(bytes);
    read_array(&mut cursor)
}
