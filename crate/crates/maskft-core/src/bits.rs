//! Compact bitsets for binary masks, LSB-first within each byte.
//!
//! Bit i lives in byte i/8 at position i%8. This is also the wire layout
//! used by the mask file format, so a bitset serializes as its raw bytes.

/// Fixed-length bitset. Bit value 1 = keep, 0 = masked out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBits {
    len: usize,
    bytes: Vec<u8>,
}

impl MaskBits {
    /// All-zero bitset of `len` bits.
    pub fn zeros(len: usize) -> Self {
        MaskBits {
            len,
            bytes: vec![0u8; len.div_ceil(8)],
        }
    }

    /// All-one bitset of `len` bits.
    pub fn ones(len: usize) -> Self {
        let mut b = Self::zeros(len);
        for i in 0..len {
            b.set(i, true);
        }
        b
    }

    /// Rebuilds from raw bytes; trailing pad bits beyond `len` must be zero.
    pub fn from_bytes(len: usize, bytes: Vec<u8>) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        let b = MaskBits { len, bytes };
        // trailing pad bits must be clear so popcounts stay honest
        for i in len..b.bytes.len() * 8 {
            if b.bytes[i / 8] >> (i % 8) & 1 != 0 {
                return None;
            }
        }
        Some(b)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        debug_assert!(i < self.len);
        let mask = 1u8 << (i % 8);
        if v {
            self.bytes[i / 8] |= mask;
        } else {
            self.bytes[i / 8] &= !mask;
        }
    }

    /// Number of set (kept) bits.
    pub fn popcount(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Number of cleared (masked) bits.
    pub fn zeros_count(&self) -> usize {
        self.len - self.popcount()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_get_popcount() {
        let mut b = MaskBits::zeros(10);
        b.set(0, true);
        b.set(9, true);
        assert!(b.get(0) && b.get(9) && !b.get(4));
        assert_eq!(b.popcount(), 2);
        assert_eq!(b.zeros_count(), 8);
    }

    #[test]
    fn byte_roundtrip_rejects_dirty_padding() {
        let b = MaskBits::ones(9);
        let bytes = b.as_bytes().to_vec();
        assert_eq!(MaskBits::from_bytes(9, bytes.clone()), Some(b));
        let mut dirty = bytes;
        dirty[1] |= 0b0000_0100; // bit 10 of a 9-bit set
        assert_eq!(MaskBits::from_bytes(9, dirty), None);
    }
}
