//! Binary tensor format used by checkpoints.
//!
//! Layout, all little-endian:
//!   rank: u32, dims: rank × u32, dtype tag: u8 (0 = f32, 1 = f64),
//!   then the raw element data.

use super::{DType, Element, Tensor};
use std::io;

/// Upper bounds used when decoding untrusted bytes.
const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("tensor data truncated: needed {needed} bytes, had {have}")]
    Truncated { needed: usize, have: usize },
    #[error("tensor rank {0} exceeds limit {MAX_RANK}")]
    RankTooLarge(u32),
    #[error("tensor with zero-sized dimension")]
    ZeroDim,
    #[error("tensor element count overflows limit")]
    TooLarge,
    #[error("unknown dtype tag {0}")]
    UnknownDType(u8),
    #[error("expected dtype {expected:?}, file holds {actual:?}")]
    DTypeMismatch { expected: DType, actual: DType },
    #[error("trailing bytes after tensor payload")]
    TrailingBytes,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode<T: Element>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * tensor.shape().len() + 1 + tensor.numel() * T::BYTE_WIDTH);
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE.tag());
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], CodecError> {
    if bytes.len() < n {
        return Err(CodecError::Truncated {
            needed: n,
            have: bytes.len(),
        });
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Decodes one tensor, requiring the element type to match `T`.
pub fn decode<T: Element>(mut bytes: &[u8]) -> Result<Tensor<T>, CodecError> {
    let rank = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
    if rank > MAX_RANK {
        return Err(CodecError::RankTooLarge(rank));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let d = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
        if d == 0 {
            return Err(CodecError::ZeroDim);
        }
        count = count.checked_mul(d as u64).ok_or(CodecError::TooLarge)?;
        if count > MAX_ELEMENTS {
            return Err(CodecError::TooLarge);
        }
        shape.push(d as usize);
    }
    let tag = take(&mut bytes, 1)?[0];
    let dtype = DType::from_tag(tag).ok_or(CodecError::UnknownDType(tag))?;
    if dtype != T::DTYPE {
        return Err(CodecError::DTypeMismatch {
            expected: T::DTYPE,
            actual: dtype,
        });
    }
    let payload = take(&mut bytes, count as usize * T::BYTE_WIDTH)?;
    if !bytes.is_empty() {
        return Err(CodecError::TrailingBytes);
    }
    let data: Vec<T> = payload
        .chunks_exact(T::BYTE_WIDTH)
        .map(T::read_le)
        .collect();
    Ok(Tensor::new(shape, data).expect("validated shape/data agreement"))
}

/// Decodes a tensor of either dtype, widening f32 to f64 when needed.
/// Used by tooling that inspects checkpoints regardless of precision.
pub fn decode_any(bytes: &[u8]) -> Result<(DType, Tensor<f64>), CodecError> {
    // Peek the dtype tag without consuming the payload.
    let mut probe = bytes;
    let rank = u32::from_le_bytes(take(&mut probe, 4)?.try_into().unwrap());
    if rank > MAX_RANK {
        return Err(CodecError::RankTooLarge(rank));
    }
    take(&mut probe, 4 * rank as usize)?;
    let tag = take(&mut probe, 1)?[0];
    match DType::from_tag(tag).ok_or(CodecError::UnknownDType(tag))? {
        DType::F32 => Ok((DType::F32, decode::<f32>(bytes)?.cast())),
        DType::F64 => Ok((DType::F64, decode::<f64>(bytes)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[0..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(bytes[12], 0); // f32 tag
        assert_eq!(bytes.len(), 13 + 6 * 4);
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let t = Tensor::<f32>::scalar(1.0);
        let bytes = encode(&t);
        assert!(matches!(
            decode::<f64>(&bytes),
            Err(CodecError::DTypeMismatch { .. })
        ));
    }

    #[test]
    fn truncation_rejected() {
        let t = Tensor::<f64>::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode(&t);
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(
            decode::<f64>(&extended),
            Err(CodecError::TrailingBytes)
        ));
    }

    #[test]
    fn hostile_headers_do_not_allocate() {
        // Rank beyond the limit.
        let mut b = 9u32.to_le_bytes().to_vec();
        b.extend_from_slice(&[0; 64]);
        assert!(matches!(decode::<f32>(&b), Err(CodecError::RankTooLarge(9))));
        // Huge dimension product.
        let mut b = 2u32.to_le_bytes().to_vec();
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        b.push(0);
        assert!(matches!(decode::<f32>(&b), Err(CodecError::TooLarge)));
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_bits(data in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
            let t = Tensor::from_vec(data);
            let back = decode::<f64>(&encode(&t)).unwrap();
            prop_assert_eq!(t.data(), back.data());
            prop_assert_eq!(t.shape(), back.shape());
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode::<f32>(&bytes);
            let _ = decode::<f64>(&bytes);
            let _ = decode_any(&bytes);
        }
    }
}
