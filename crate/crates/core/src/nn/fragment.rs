//! Checkpoint fragment encoding of a single tensor:
//! `[u32 rank][u32 dims; rank][f32 values]`, all little-endian.

use std::io::{Read, Write};

use super::{NnError, Scalar};

pub fn fragment_len(dims: &[usize]) -> usize {
    4 + 4 * dims.len() + 4 * dims.iter().product::<usize>()
}

/// Appends the fragment encoding of `values` with shape `dims`.
pub fn encode_fragment<T: Scalar>(dims: &[usize], values: &[T], out: &mut Vec<u8>) -> Result<(), NnError> {
    let numel: usize = dims.iter().product();
    if numel != values.len() {
        return Err(NnError::LengthMismatch { what: "fragment values", expected: numel, actual: values.len() });
    }
    out.reserve(fragment_len(dims));
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| NnError::Fragment { offset: out.len(), msg: format!("dimension {d} exceeds u32") })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    Ok(())
}

/// Decodes one fragment starting at `*pos`, advancing `*pos` past it.
pub fn decode_fragment<T: Scalar>(bytes: &[u8], pos: &mut usize) -> Result<(Vec<usize>, Vec<T>), NnError> {
    let start = *pos;
    let mut take = |n: usize, what: &str| -> Result<&[u8], NnError> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| NnError::Fragment {
            offset: *pos,
            msg: format!("truncated {what}: need {n} bytes, {} available", bytes.len().saturating_sub(*pos)),
        })?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    let rank = u32::from_le_bytes(take(4, "rank")?.try_into().expect("4 bytes")) as usize;
    if rank == 0 || rank > 8 {
        return Err(NnError::Fragment { offset: start, msg: format!("unsupported rank {rank}") });
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(take(4, "dims")?.try_into().expect("4 bytes")) as usize);
    }
    let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(NnError::Fragment {
        offset: start,
        msg: "element count overflows".into(),
    })?;
    let raw = take(numel.checked_mul(4).unwrap_or(usize::MAX), "values")?;
    let values = raw
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    Ok((dims, values))
}

pub fn write_fragment<T: Scalar, W: Write>(w: &mut W, dims: &[usize], values: &[T]) -> Result<(), NnError> {
    let mut buf = Vec::new();
    encode_fragment(dims, values, &mut buf)?;
    w.write_all(&buf).map_err(|e| NnError::Io(e.to_string()))
}

pub fn read_fragment<T: Scalar, R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<T>), NnError> {
    let mut head = [0u8; 4];
    r.read_exact(&mut head).map_err(|e| NnError::Io(e.to_string()))?;
    let rank = u32::from_le_bytes(head) as usize;
    if rank == 0 || rank > 8 {
        return Err(NnError::Fragment { offset: 0, msg: format!("unsupported rank {rank}") });
    }
    let mut dim_bytes = vec![0u8; 4 * rank];
    r.read_exact(&mut dim_bytes).map_err(|e| NnError::Io(e.to_string()))?;
    let numel: usize = dim_bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).product();
    let mut buf = Vec::with_capacity(4 + dim_bytes.len() + 4 * numel);
    buf.extend_from_slice(&head);
    buf.extend_from_slice(&dim_bytes);
    let mut values = vec![0u8; 4 * numel];
    r.read_exact(&mut values).map_err(|e| NnError::Io(e.to_string()))?;
    buf.extend_from_slice(&values);
    decode_fragment(&buf, &mut 0)
}
