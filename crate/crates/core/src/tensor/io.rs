//! Flat binary tensor encoding: 8-byte magic, `u32` rank, `rank` x `u32`
//! dims, then the values as little-endian `f64`.

use std::io::{Read, Write};

use super::{numel, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"PSTENSR1";

pub fn write_tensor<W: Write>(mut out: W, t: &Tensor) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 * t.numel());
    for v in t.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

/// Decode one tensor. `offset` is the byte position of the tensor in the
/// enclosing stream and is only used for error messages.
pub fn read_tensor<R: Read>(mut input: R, offset: usize) -> Result<Tensor> {
    let mut pos = offset;
    let mut take = |buf: &mut [u8], what: &str| -> Result<()> {
        input.read_exact(buf).map_err(|e| Error::Parse {
            what: "tensor",
            offset: pos,
            msg: format!("truncated {what}: {e}"),
        })?;
        pos += buf.len();
        Ok(())
    };
    let mut magic = [0u8; 8];
    take(&mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Parse {
            what: "tensor",
            offset,
            msg: "bad magic".into(),
        });
    }
    let mut word = [0u8; 4];
    take(&mut word, "rank")?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 8 {
        return Err(Error::Parse {
            what: "tensor",
            offset: offset + 8,
            msg: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        take(&mut word, "dims")?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let mut payload = vec![0u8; 8 * numel(&shape)];
    take(&mut payload, "payload")?;
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(&shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let t = Tensor::new(&[2, 1, 3], vec![1.5, -0.0, 3.25, f64::MIN_POSITIVE, 7.0, -9.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 3 * 4 + 6 * 8);
        assert_eq!(&buf[..8], TENSOR_MAGIC);
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[24..32], &1.5f64.to_le_bytes());
        let back = read_tensor(&buf[..], 0).unwrap();
        assert_eq!(back.shape(), t.shape());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.values()), bits(t.values()));
    }

    #[test]
    fn truncation_and_magic_errors() {
        let t = Tensor::full(&[4], 1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(matches!(read_tensor(&buf[..buf.len() - 1], 0), Err(Error::Parse { .. })));
        buf[0] = b'X';
        assert!(matches!(read_tensor(&buf[..], 0), Err(Error::Parse { offset: 0, .. })));
    }
}
