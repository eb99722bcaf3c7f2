//! Binary masks over a low-resolution feature grid.

use crate::error::{Error, Result};

/// An h x w binary mask, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(y, x);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Indices (row-major) of the set cells.
    pub fn set_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    /// Packs the mask into bytes, row-major, most significant bit first.
    /// Used by the run archive.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    pub fn unpack(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let n = height * width;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::InvalidConfig(format!(
                "packed mask has {} bytes, expected {}",
                bytes.len(),
                n.div_ceil(8)
            )));
        }
        let bits = (0..n)
            .map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0)
            .collect();
        Ok(Self {
            height,
            width,
            bits,
        })
    }
}

/// Flattens an h x w mask into an hw-length binary column, row-major.
pub fn mask_to_flat(mask: &BinaryMask) -> Vec<bool> {
    mask.bits.clone()
}

/// Inverse of [`mask_to_flat`].
pub fn mask_from_flat(height: usize, width: usize, flat: &[bool]) -> Result<BinaryMask> {
    if flat.len() != height * width {
        return Err(Error::InvalidConfig(format!(
            "flat mask has {} entries, expected {}",
            flat.len(),
            height * width
        )));
    }
    Ok(BinaryMask {
        height,
        width,
        bits: flat.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flatten_is_row_major() {
        let m = BinaryMask::from_fn(2, 2, |y, x| y == 0 && x == 0);
        assert_eq!(mask_to_flat(&m), vec![true, false, false, false]);
    }

    #[test]
    fn all_ones_flattens_to_all_ones() {
        let m = BinaryMask::from_fn(3, 5, |_, _| true);
        assert!(mask_to_flat(&m).iter().all(|&b| b));
        assert_eq!(mask_to_flat(&m).len(), 15);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trips(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            let mut state = seed;
            let m = BinaryMask::from_fn(h, w, |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 60) & 1 == 1
            });
            let flat = mask_to_flat(&m);
            let back = mask_from_flat(h, w, &flat).unwrap();
            prop_assert_eq!(m, back);
        }

        #[test]
        fn pack_unpack_round_trips(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let mut state = seed | 1;
            let m = BinaryMask::from_fn(h, w, |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(99);
                (state >> 61) & 1 == 1
            });
            let back = BinaryMask::unpack(h, w, &m.pack()).unwrap();
            prop_assert_eq!(m, back);
        }
    }
}
