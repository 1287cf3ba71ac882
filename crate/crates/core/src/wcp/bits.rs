//! LSB-first bit stream used by the wire format.

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    pub fn with_capacity_bits(bits: usize) -> Self {
        Self { bytes: Vec::with_capacity(bits.div_ceil(8)), acc: 0, filled: 0 }
    }

    /// Appends the low `bits` bits of `value` (`bits` ≤ 64).
    pub fn write(&mut self, value: u64, bits: u32) {
        debug_assert!(bits <= 64);
        if bits == 0 {
            return;
        }
        let value = if bits == 64 { value } else { value & ((1u64 << bits) - 1) };
        let room = 64 - self.filled;
        if bits <= room {
            self.acc |= value.checked_shl(self.filled).unwrap_or(0);
            self.filled += bits;
            if self.filled == 64 {
                self.flush_word();
            }
        } else {
            self.acc |= value << self.filled;
            self.filled = 64;
            self.flush_word();
            self.acc = value >> room;
            self.filled = bits - room;
        }
    }

    fn flush_word(&mut self) {
        self.bytes.extend_from_slice(&self.acc.to_le_bytes());
        self.acc = 0;
        self.filled = 0;
    }

    /// Pads the final partial byte with zeros.
    pub fn finish(mut self) -> Vec<u8> {
        let tail = self.filled.div_ceil(8) as usize;
        let word = self.acc.to_le_bytes();
        self.bytes.extend_from_slice(&word[..tail]);
        self.bytes
    }
}

#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    bit_pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, bit_pos: 0 }
    }

    pub fn read(&mut self, bits: u32) -> Result<u64> {
        debug_assert!(bits <= 64);
        let end = self.bit_pos + bits as usize;
        if end > self.bytes.len() * 8 {
            return Err(Error::CorruptPayload(format!(
                "bit stream truncated: need bit {end}, have {}",
                self.bytes.len() * 8
            )));
        }
        let mut out = 0u64;
        let mut got = 0u32;
        while got < bits {
            let byte = self.bytes[self.bit_pos / 8];
            let offset = (self.bit_pos % 8) as u32;
            let take = (8 - offset).min(bits - got);
            let chunk = (u64::from(byte) >> offset) & ((1u64 << take) - 1);
            out |= chunk << got;
            got += take;
            self.bit_pos += take as usize;
        }
        Ok(out)
    }

    pub fn bits_consumed(&self) -> usize {
        self.bit_pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn packs_lsb_first() {
        let mut w = BitWriter::default();
        w.write(0b1, 1);
        w.write(0b10, 2);
        w.write(0b11111, 5);
        assert_eq!(w.finish(), vec![0b1111_1101]);
    }

    #[test]
    fn reading_past_end_is_corrupt() {
        let mut r = BitReader::new(&[0xff]);
        assert!(r.read(8).is_ok());
        assert!(r.read(1).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(items in proptest::collection::vec((any::<u64>(), 1u32..=64), 0..200)) {
            let mut w = BitWriter::default();
            for (v, b) in &items {
                w.write(*v, *b);
            }
            let total: usize = items.iter().map(|(_, b)| *b as usize).sum();
            let bytes = w.finish();
            prop_assert_eq!(bytes.len(), total.div_ceil(8));
            let mut r = BitReader::new(&bytes);
            for (v, b) in &items {
                let mask = if *b == 64 { u64::MAX } else { (1u64 << b) - 1 };
                prop_assert_eq!(r.read(*b).unwrap(), v & mask);
            }
        }
    }
}
