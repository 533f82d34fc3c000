//! Bit strings stored most-significant-bit first.

use super::ExtractorError;

/// A bit string. Bit `i` lives in word `i / 64` at bit position `63 − i % 64`,
/// so the byte and hex forms read left to right in bit order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitString {
    words: Vec<u64>,
    len: usize,
}

impl BitString {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut s = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            s.set(i, b);
        }
        s
    }

    /// The first `len` bits of `bytes`, most significant bit of each byte first.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self, ExtractorError> {
        if len > bytes.len() * 8 {
            return Err(ExtractorError::LengthMismatch {
                what: "byte buffer",
                expected: len.div_ceil(8),
                got: bytes.len(),
            });
        }
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, chunk) in bytes[..len.div_ceil(8)].chunks(8).enumerate() {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            words[i] = u64::from_be_bytes(buf);
        }
        let mut s = Self { words, len };
        s.clear_tail();
        Ok(s)
    }

    /// Parses `len` bits from hex, most significant nibble first.
    pub fn from_hex(hex_str: &str, len: usize) -> Result<Self, ExtractorError> {
        let bytes = hex::decode(hex_str.trim()).map_err(|e| ExtractorError::InvalidInput(e.to_string()))?;
        Self::from_bytes(&bytes, len)
    }

    fn clear_tail(&mut self) {
        let r = self.len % 64;
        if r != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= !0u64 << (64 - r);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (63 - i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let mask = 1u64 << (63 - i % 64);
        if v {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn push(&mut self, v: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        self.len += 1;
        self.set(self.len - 1, v);
    }

    /// Appends the low `n` bits of `v`, most significant first.
    pub fn push_bits(&mut self, v: u64, n: u32) {
        for j in (0..n).rev() {
            self.push((v >> j) & 1 == 1);
        }
    }

    /// Extends with zeros to `len` bits.
    pub fn pad_to(&mut self, len: usize) {
        if len > self.len {
            self.words.resize(len.div_ceil(64), 0);
            self.len = len;
        }
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    /// Bytes with the last one zero-padded on the right.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_be_bytes()).collect();
        out.truncate(self.len.div_ceil(8));
        out
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Bits `[pos, pos + 64)` as a word, first bit most significant; bits
    /// past the end read as zero.
    pub fn window64(&self, pos: usize) -> u64 {
        let (q, r) = (pos / 64, pos % 64);
        let w0 = self.words.get(q).copied().unwrap_or(0);
        if r == 0 {
            return w0;
        }
        let w1 = self.words.get(q + 1).copied().unwrap_or(0);
        (w0 << r) | (w1 >> (64 - r))
    }

    /// Bits `[start, start + nbits)` as an integer in little-endian limbs, the
    /// first bit being the most significant. Bits past the end read as zero.
    pub fn read_uint<const N: usize>(&self, start: usize, nbits: usize) -> [u64; N] {
        debug_assert!(nbits <= 64 * N);
        let mut out = [0u64; N];
        let mut q = 0;
        let mut remaining = nbits;
        while remaining > 0 {
            if remaining >= 64 {
                out[q] = self.window64(start + remaining - 64);
                remaining -= 64;
            } else {
                out[q] = self.window64(start) >> (64 - remaining);
                remaining = 0;
            }
            q += 1;
        }
        out
    }

    /// The bits at `indices`, in the given order.
    pub fn gather(&self, indices: &[u64]) -> BitString {
        let mut out = BitString::zeros(indices.len());
        for (j, &i) in indices.iter().enumerate() {
            if self.get(i as usize) {
                out.set(j, true);
            }
        }
        out
    }
}
