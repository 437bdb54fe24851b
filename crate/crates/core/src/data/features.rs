//! Binary feature files: the 8-byte magic `UAVFEAT1`, little-endian `u32`
//! row count `T` and width `D`, then `T * D` little-endian `f32` values in
//! row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"UAVFEAT1";
const HEADER_LEN: usize = 16;

pub fn encode_features(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (rows, cols) = t.dims2()?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for n in [rows, cols] {
        let n = u32::try_from(n).map_err(|_| Error::Input(format!("dimension {n} does not fit in u32")))?;
        out.extend_from_slice(&n.to_le_bytes());
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let fail = |offset: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 8 {
        return Err(fail(bytes.len(), "file ends inside the magic".into()));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(fail(0, "bad magic, expected UAVFEAT1".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), "file ends inside the header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(8), word(12));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(8, format!("shape [{rows}, {cols}] overflows")))?;
    let payload = bytes.len() - HEADER_LEN;
    if payload != expected {
        return Err(fail(
            HEADER_LEN + payload.min(expected),
            format!("header declares [{rows}, {cols}] ({expected} payload bytes), found {payload}"),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&[rows, cols], data)
}

pub fn write_features(path: &Path, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_features(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rows: usize, cols: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Tensor::new(
            &[rows, cols],
            (0..rows * cols).map(|_| rng.random::<f32>() - 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.feat");
        let t = random(64, 32);
        write_features(&p, &t).unwrap();
        let back = read_features(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let len = std::fs::metadata(&p).unwrap().len() as usize;
        assert_eq!((len - HEADER_LEN) / 4, 64 * 32);
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let p = Path::new("mem");
        let bytes = encode_features(&random(4, 3)).unwrap();
        for cut in [0, 5, 12, 20, bytes.len() - 1] {
            assert!(
                matches!(decode_features(&bytes[..cut], p), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(decode_features(&bad, p), Err(Error::Format { offset: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(decode_features(&long, p).is_err());
    }
}
