//! Depth-difference vectors and sign-hash binarisation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::image::{DepthImage, Shape};

use super::round_coord;

/// Number of entries in a depth-difference vector for an odd patch side.
pub fn diff_len(patch_side: usize) -> usize {
    patch_side * patch_side - 1
}

fn check_side(patch_side: usize) -> Result<()> {
    if patch_side % 2 == 0 {
        return Err(Error::EvenPatchSide(patch_side));
    }
    Ok(())
}

/// One vector per landmark: neighbour minus centre over the row-major patch,
/// skipping the centre, with replicate padding at the borders.
pub fn extract_depth_diff(img: &DepthImage, shape: &Shape, patch_side: usize) -> Result<Vec<Vec<f64>>> {
    check_side(patch_side)?;
    let p = diff_len(patch_side);
    Ok(shape
        .points
        .iter()
        .map(|&pt| {
            let mut d = vec![0.0; p];
            depth_diff_into(img, pt, patch_side, &mut d);
            d
        })
        .collect())
}

pub(crate) fn depth_diff_into(img: &DepthImage, center: [f64; 2], patch_side: usize, out: &mut [f64]) {
    let r = (patch_side / 2) as i64;
    let (cx, cy) = (round_coord(center[0]), round_coord(center[1]));
    let c = img.clamped(cx, cy);
    let mut k = 0;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx == 0 && dy == 0 {
                continue;
            }
            out[k] = img.clamped(cx + dx, cy + dy) - c;
            k += 1;
        }
    }
}

/// `0.5 (sgn(W^T d) + 1)` with `sgn(0) = +1`; one byte per bit.
pub fn binarize(d: &[f64], w: &DMatrix<f64>) -> Result<Vec<u8>> {
    if w.nrows() != d.len() {
        return Err(Error::DimensionMismatch(format!(
            "projection has {} rows, vector has {} entries",
            w.nrows(),
            d.len()
        )));
    }
    if w.ncols() == 0 {
        return Err(Error::InvalidParameter("projection needs at least one column".into()));
    }
    Ok((0..w.ncols())
        .map(|j| (project(w, j, d) >= 0.0) as u8)
        .collect())
}

#[inline]
pub(crate) fn project(w: &DMatrix<f64>, col: usize, d: &[f64]) -> f64 {
    w.column(col).iter().zip(d).map(|(a, b)| a * b).sum()
}

/// Bit-packed binary code: bit `b` lives in word `b / 64` at position
/// `b % 64`; words serialise little-endian.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedCode {
    pub bits: usize,
    pub words: Vec<u64>,
}

impl PackedCode {
    pub fn zeros(bits: usize) -> Self {
        Self {
            bits,
            words: vec![0; bits.div_ceil(64)],
        }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b != 0 {
                code.set(i);
            }
        }
        code
    }

    #[inline]
    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    #[inline]
    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Indices of set bits in ascending order.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut rest = w;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let t = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(wi * 64 + t)
            })
        })
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bits: usize, bytes: &[u8]) -> Result<Self> {
        let n = bits.div_ceil(64);
        if bytes.len() != n * 8 {
            return Err(Error::DimensionMismatch(format!(
                "{bits} bits need {} bytes, got {}",
                n * 8,
                bytes.len()
            )));
        }
        let words = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { bits, words })
    }
}
