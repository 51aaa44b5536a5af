//! Signed fixed-width integer tensors and their on-disk forms.
//!
//! Binary layout: magic `LPT1`, element width in bits (u8), rank (u8), the
//! dimensions as little-endian u32, then the elements as little-endian
//! two's-complement words of the declared width.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LPT1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub bits: u32,
    pub data: Vec<i32>,
}

fn check_bits(bits: u32) -> Result<()> {
    if matches!(bits, 8 | 16 | 32) {
        Ok(())
    } else {
        Err(Error::Unsupported(format!("{bits}-bit tensors")))
    }
}

/// Signed range of a `bits`-wide word.
pub fn signed_range(bits: u32) -> (i64, i64) {
    let half = 1i64 << (bits - 1);
    (-half, half - 1)
}

pub fn saturate(v: i64, bits: u32) -> i32 {
    let (lo, hi) = signed_range(bits);
    v.clamp(lo, hi) as i32
}

impl Tensor {
    pub fn zeros(shape: &[usize], bits: u32) -> Result<Self> {
        check_bits(bits)?;
        Ok(Self {
            shape: shape.to_vec(),
            bits,
            data: vec![0; shape.iter().product()],
        })
    }

    pub fn from_vec(shape: &[usize], bits: u32, data: Vec<i32>) -> Result<Self> {
        check_bits(bits)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        let t = Self {
            shape: shape.to_vec(),
            bits,
            data,
        };
        t.check_range()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_range(&self) -> Result<()> {
        let (lo, hi) = signed_range(self.bits);
        match self.data.iter().position(|&v| (v as i64) < lo || (v as i64) > hi) {
            Some(i) => Err(Error::Shape(format!(
                "element {i} = {} outside the {}-bit range",
                self.data[i], self.bits
            ))),
            None => Ok(()),
        }
    }

    /// Dimensions padded on the left to rank `n` with ones.
    pub fn dims<const N: usize>(&self) -> Result<[usize; N]> {
        if self.shape.len() > N {
            return Err(Error::Shape(format!("expected at most rank {N}, got {:?}", self.shape)));
        }
        let mut out = [1; N];
        out[N - self.shape.len()..].copy_from_slice(&self.shape);
        Ok(out)
    }

    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.bits as u8, self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            match self.bits {
                8 => w.write_all(&(v as i8).to_le_bytes())?,
                16 => w.write_all(&(v as i16).to_le_bytes())?,
                _ => w.write_all(&v.to_le_bytes())?,
            }
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(Error::Parse("not a tensor file (bad magic)".into()));
        }
        let bits = head[4] as u32;
        check_bits(bits)?;
        let mut shape = Vec::with_capacity(head[5] as usize);
        for _ in 0..head[5] {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * (bits as usize / 8)];
        r.read_exact(&mut raw)?;
        let data = match bits {
            8 => raw.iter().map(|&b| b as i8 as i32).collect(),
            16 => raw
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
                .collect(),
            _ => raw
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        };
        Ok(Self { shape, bits, data })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tensor serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Tensor = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_vec(&t.shape.clone(), t.bits, t.data)
    }
}

/// Round half away from zero, then clamp to the signed `bits` range.
pub fn quantize(values: &[f64], shape: &[usize], bits: u32) -> Result<Tensor> {
    if bits != 8 && bits != 16 {
        return Err(Error::Unsupported(format!("quantizing to {bits} bits (only 8 and 16)")));
    }
    let (lo, hi) = signed_range(bits);
    let data = values
        .iter()
        .map(|v| v.round().clamp(lo as f64, hi as f64) as i32)
        .collect();
    Tensor::from_vec(shape, bits, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.0], &[1], 8).unwrap().data, vec![0]);
        assert_eq!(quantize(&[-200.0, 200.0], &[2], 8).unwrap().data, vec![-128, 127]);
        assert_eq!(quantize(&[0.5, -0.5, 1.49], &[3], 8).unwrap().data, vec![1, -1, 1]);
        assert_eq!(quantize(&[40000.0], &[1], 16).unwrap().data, vec![32767]);
        assert!(matches!(quantize(&[1.0], &[1], 12), Err(Error::Unsupported(_))));
    }

    #[test]
    fn binary_round_trip() {
        for bits in [8, 16, 32] {
            let (lo, hi) = signed_range(bits);
            let t = Tensor::from_vec(&[2, 3], bits, vec![lo as i32, -1, 0, 1, 7, hi as i32]).unwrap();
            let mut buf = Vec::new();
            t.write_binary(&mut buf).unwrap();
            assert_eq!(buf.len(), 6 + 8 + 6 * bits as usize / 8);
            assert_eq!(Tensor::read_binary(buf.as_slice()).unwrap(), t);
        }
    }

    #[test]
    fn json_round_trip_and_range_check() {
        let t = Tensor::from_vec(&[2], 8, vec![-5, 9]).unwrap();
        assert_eq!(Tensor::from_json(&t.to_json()).unwrap(), t);
        assert!(Tensor::from_json(r#"{"shape":[1],"bits":8,"data":[300]}"#).is_err());
        assert!(Tensor::from_vec(&[3], 8, vec![1, 2]).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            Tensor::read_binary(&b"XXXX\x08\x00"[..]),
            Err(Error::Parse(_))
        ));
    }
}
