//! Binary tensor container and CSV fixtures.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "ATNS" | version: u16 = 1 | dtype: u8 | rank: u8 | dims: rank x u32 | payload
//! ```

use std::fs;
use std::path::Path;

use super::{DType, Tensor, TensorData, MAX_RANK};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"ATNS";
const VERSION: u16 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.len() * t.dtype().size_of());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.dtype().code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t.data() {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
        TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
        TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
    }
    out
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *pos + n;
    if end > buf.len() {
        return Err(Error::TruncatedPayload { expected: end, found: buf.len() });
    }
    let s = &buf[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn decode(buf: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic: [u8; 4] = take(buf, &mut pos, 4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes(take(buf, &mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = DType::from_code(take(buf, &mut pos, 1)?[0])?;
    let rank = take(buf, &mut pos, 1)?[0] as usize;
    if rank > MAX_RANK {
        return Err(Error::RankTooLarge(rank));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(buf, &mut pos, 4)?.try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    let payload = take(buf, &mut pos, n * dtype.size_of())?;
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        ),
        DType::I32 => TensorData::I32(
            payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
        DType::I8 => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
    };
    Tensor::new(shape, data)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

/// Writes a rank-1 or rank-2 tensor as comma-separated decimal, one row per
/// line. Rank 1 is written as a single row.
pub fn write_csv(t: &Tensor) -> Result<String> {
    let cols = match t.shape() {
        [n] => *n,
        [_, c] => *c,
        other => return Err(Error::Csv(format!("only rank 1 or 2 can be written as csv, got {other:?}"))),
    };
    let cells: Vec<String> = match t.data() {
        TensorData::F32(v) => v.iter().map(|x| x.to_string()).collect(),
        TensorData::I32(v) => v.iter().map(|x| x.to_string()).collect(),
        TensorData::U8(v) => v.iter().map(|x| x.to_string()).collect(),
        TensorData::I8(v) => v.iter().map(|x| x.to_string()).collect(),
    };
    let mut out = String::new();
    if cols == 0 {
        return Ok(out);
    }
    for row in cells.chunks(cols) {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Parses comma-separated rows into a `[rows, cols]` tensor of `dtype`.
pub fn read_csv(text: &str, dtype: DType) -> Result<Tensor> {
    let mut cols = None;
    let mut rows = 0;
    let mut cells: Vec<&str> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = cells.len();
        cells.extend(line.split(',').map(str::trim));
        let width = cells.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::Csv(format!("line {}: expected {c} fields, found {width}", lineno + 1)))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    fn parse<T: std::str::FromStr>(cells: &[&str]) -> Result<Vec<T>> {
        cells
            .iter()
            .map(|c| c.parse::<T>().map_err(|_| Error::Csv(format!("cannot parse {c:?}"))))
            .collect()
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(parse(&cells)?),
        DType::I32 => TensorData::I32(parse(&cells)?),
        DType::U8 => TensorData::U8(parse(&cells)?),
        DType::I8 => TensorData::I8(parse(&cells)?),
    };
    Tensor::new(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.atns");
        let t = Tensor::from_f32(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap();
        write_tensor(&t, &path).unwrap();
        assert!(read_tensor(&path).unwrap().bit_eq(&t));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&Tensor::from_u8(vec![1], vec![7]).unwrap());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode(&Tensor::from_u8(vec![1], vec![7]).unwrap());
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode(&Tensor::from_i32(vec![3], vec![1, 2, 3]).unwrap());
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&Tensor::from_i8(vec![1, 2], vec![-63, 5]).unwrap());
        assert_eq!(&bytes[..4], b"ATNS");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 3);
        assert_eq!(bytes[7], 2);
        assert_eq!(&bytes[8..16], &[1, 0, 0, 0, 2, 0, 0, 0]);
        // two's complement of -63
        assert_eq!(bytes[16], 0xC1);
        assert_eq!(bytes[17], 5);
    }

    #[test]
    fn csv_round_trip_and_ragged() {
        let t = Tensor::from_i32(vec![2, 3], vec![1, -2, 3, 4, 5, -6]).unwrap();
        let text = write_csv(&t).unwrap();
        assert_eq!(text, "1,-2,3\n4,5,-6\n");
        assert_eq!(read_csv(&text, DType::I32).unwrap(), t);
        assert!(matches!(read_csv("1,2\n3\n", DType::I32), Err(Error::Csv(_))));
    }

    fn any_tensor() -> impl Strategy<Value = Tensor> {
        let shape = prop::collection::vec(0usize..4, 0..4);
        (shape, 0u8..4).prop_flat_map(|(shape, code)| {
            let n: usize = shape.iter().product();
            let data = match code {
                0 => prop::collection::vec(any::<u32>(), n)
                    .prop_map(|v| TensorData::F32(v.into_iter().map(f32::from_bits).collect()))
                    .boxed(),
                1 => prop::collection::vec(any::<i32>(), n).prop_map(TensorData::I32).boxed(),
                2 => prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8).boxed(),
                _ => prop::collection::vec(any::<i8>(), n).prop_map(TensorData::I8).boxed(),
            };
            data.prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
        })
    }

    proptest! {
        // arbitrary f32 bit patterns cover NaN payloads
        #[test]
        fn encode_decode_is_identity(t in any_tensor()) {
            prop_assert!(decode(&encode(&t)).unwrap().bit_eq(&t));
        }
    }
}
