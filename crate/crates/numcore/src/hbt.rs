//! HBT1 tensor files.
//!
//! Layout: magic `HBT1`, `u32` LE rank, `rank` x `u32` LE dims, then the
//! row-major payload as `f32` LE.

use std::io::{Read, Write};

use crate::error::{NumError, Result};
use crate::tensor::{checked_numel, Tensor};

pub const MAGIC: &[u8; 4] = b"HBT1";
const MAX_RANK: u32 = 16;

pub fn write_hbt1<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| NumError::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    write_hbt1(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn read_hbt1<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| NumError::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(NumError::Format(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(&mut r)?;
    if rank > MAX_RANK {
        return Err(NumError::Format(format!("rank {rank} too large")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = checked_numel(&shape)?;
    let bytes = n
        .checked_mul(4)
        .ok_or_else(|| NumError::Format("payload size overflow".into()))?;
    let mut payload = Vec::new();
    (&mut r).take(bytes as u64).read_to_end(&mut payload)?;
    if payload.len() != bytes {
        return Err(NumError::Format(format!(
            "payload truncated: want {bytes} bytes, got {}",
            payload.len()
        )));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(NumError::Format("trailing bytes after payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(shape, data)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    read_hbt1(bytes)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| NumError::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_built_fixture() {
        let mut bytes = b"HBT1".to_vec();
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(3u32.to_le_bytes());
        for v in 1..=6 {
            bytes.extend((v as f32).to_le_bytes());
        }
        let t = from_bytes(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(to_bytes(&t), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        assert!(from_bytes(b"HBT2\0\0\0\0").is_err());
        let mut huge = b"HBT1".to_vec();
        huge.extend(3u32.to_le_bytes());
        for _ in 0..3 {
            huge.extend(u32::MAX.to_le_bytes());
        }
        assert!(matches!(from_bytes(&huge), Err(NumError::Format(_))));
        let mut short = to_bytes(&Tensor::zeros([2, 2]));
        short.pop();
        assert!(from_bytes(&short).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_byte_exact(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut s = crate::rng::Stream::from_seed(seed);
            let t = Tensor::randn([rows, cols], 3.0, &mut s);
            let bytes = to_bytes(&t);
            let back = from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(to_bytes(&back), bytes);
        }
    }
}
