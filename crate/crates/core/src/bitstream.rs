//! Container for the token matrices of every branch.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "SDC1" | version u16 | frame_rate u32 | branch_count u8
//! per branch: sample_rate u32 | n_quantizers u8 | codebook_bits u8 | frame_count u32
//! per branch: tokens MSB-first, stage-major then frame, zero-padded to a byte
//! ```
//!
//! Branch payloads appear in header order, so a reader that only wants the
//! lowest-rate branch can stop after its payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDC1";
pub const VERSION: u16 = 1;
const FIXED_HEADER: usize = 4 + 2 + 4 + 1;
const BRANCH_HEADER: usize = 4 + 1 + 1 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchTokens {
    pub sample_rate: u32,
    pub codebook_bits: u8,
    /// `tokens[stage][frame]`.
    pub tokens: Vec<Vec<usize>>,
}

impl BranchTokens {
    pub fn new(sample_rate: u32, codebook_bits: u8, tokens: Vec<Vec<usize>>) -> Result<Self> {
        let b = Self {
            sample_rate,
            codebook_bits,
            tokens,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn n_quantizers(&self) -> usize {
        self.tokens.len()
    }

    pub fn frame_count(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn payload_bits(&self) -> u64 {
        self.n_quantizers() as u64 * self.frame_count() as u64 * self.codebook_bits as u64
    }

    fn payload_bytes(&self) -> usize {
        self.payload_bits().div_ceil(8) as usize
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Bitstream(m));
        if !(1..=16).contains(&self.codebook_bits) {
            return bad(format!("codebook_bits {} outside 1..=16", self.codebook_bits));
        }
        if self.tokens.is_empty() || self.tokens.len() > u8::MAX as usize {
            return bad(format!("{} quantizer stages", self.tokens.len()));
        }
        let frames = self.frame_count();
        if frames > u32::MAX as usize {
            return bad(format!("{frames} frames"));
        }
        let limit = 1usize << self.codebook_bits;
        for (stage, row) in self.tokens.iter().enumerate() {
            if row.len() != frames {
                return bad(format!("stage {stage} has {} frames, expected {frames}", row.len()));
            }
            if let Some(&t) = row.iter().find(|&&t| t >= limit) {
                return Err(Error::InvalidToken { stage, token: t, size: limit });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub frame_rate: u32,
    pub branches: Vec<BranchTokens>,
}

impl TokenStream {
    pub fn new(frame_rate: u32, branches: Vec<BranchTokens>) -> Result<Self> {
        if branches.is_empty() || branches.len() > u8::MAX as usize {
            return Err(Error::Bitstream(format!("{} branches", branches.len())));
        }
        for b in &branches {
            b.validate()?;
        }
        Ok(Self { frame_rate, branches })
    }

    pub fn header_len(&self) -> usize {
        FIXED_HEADER + BRANCH_HEADER * self.branches.len()
    }

    /// Payload bits per second of the first `n` branches.
    pub fn payload_bitrate(&self, n: usize) -> f64 {
        self.branches
            .iter()
            .take(n)
            .map(|b| b.n_quantizers() as f64 * b.codebook_bits as f64 * self.frame_rate as f64)
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.branches.iter().map(BranchTokens::payload_bytes).sum();
        let mut out = Vec::with_capacity(self.header_len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.frame_rate.to_le_bytes());
        out.push(self.branches.len() as u8);
        for b in &self.branches {
            out.extend_from_slice(&b.sample_rate.to_le_bytes());
            out.push(b.n_quantizers() as u8);
            out.push(b.codebook_bits);
            out.extend_from_slice(&(b.frame_count() as u32).to_le_bytes());
        }
        for b in &self.branches {
            let mut w = BitWriter::with_capacity(b.payload_bytes());
            for row in &b.tokens {
                for &t in row {
                    w.put(t as u32, b.codebook_bits);
                }
            }
            out.extend_from_slice(&w.finish());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes, usize::MAX, true)
    }

    /// Reads only the first `n` branches; later payloads are not touched.
    pub fn from_bytes_prefix(bytes: &[u8], n: usize) -> Result<Self> {
        Self::parse(bytes, n, false)
    }

    fn parse(bytes: &[u8], keep: usize, exact: bool) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Bitstream(format!("unsupported version {version}")));
        }
        let frame_rate = u32::from_le_bytes(r.array()?);
        let count = r.take(1)?[0] as usize;
        if count == 0 {
            return Err(Error::Bitstream("no branches".into()));
        }
        let mut headers = Vec::with_capacity(count);
        for i in 0..count {
            let rate = u32::from_le_bytes(r.array()?);
            let [n_q, bits] = r.array()?;
            let frames = u32::from_le_bytes(r.array()?) as usize;
            if n_q == 0 || !(1..=16).contains(&bits) {
                return Err(Error::Bitstream(format!("branch {i}: {n_q} stages of {bits} bits")));
            }
            headers.push((rate, n_q as usize, bits, frames));
        }
        let mut branches = Vec::with_capacity(count.min(keep));
        for &(rate, n_q, bits, frames) in headers.iter().take(keep) {
            let nbytes = (n_q as u64 * frames as u64 * bits as u64).div_ceil(8) as usize;
            let mut br = BitReader::new(r.take(nbytes)?);
            let tokens = (0..n_q)
                .map(|_| (0..frames).map(|_| br.get(bits) as usize).collect())
                .collect();
            if br.rest_nonzero() {
                return Err(Error::Bitstream("nonzero padding bits".into()));
            }
            branches.push(BranchTokens {
                sample_rate: rate,
                codebook_bits: bits,
                tokens,
            });
        }
        if exact && r.pos != bytes.len() {
            return Err(Error::Bitstream(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { frame_rate, branches })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Bitstream(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice has length N"))
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn with_capacity(bytes: usize) -> Self {
        Self {
            out: Vec::with_capacity(bytes),
            acc: 0,
            filled: 0,
        }
    }

    /// Appends the low `bits` bits of `v`, most significant first.
    fn put(&mut self, v: u32, bits: u8) {
        self.acc = (self.acc << bits) | (v as u64 & ((1 << bits) - 1));
        self.filled += bits as u32;
        while self.filled >= 8 {
            self.filled -= 8;
            self.out.push((self.acc >> self.filled) as u8);
        }
        self.acc &= (1 << self.filled) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.out.push((self.acc << (8 - self.filled)) as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, bit: 0 }
    }

    /// Caller guarantees enough bits remain.
    fn get(&mut self, bits: u8) -> u32 {
        let mut v = 0u32;
        for _ in 0..bits {
            let b = (self.bytes[self.bit / 8] >> (7 - self.bit % 8)) & 1;
            v = (v << 1) | b as u32;
            self.bit += 1;
        }
        v
    }

    fn rest_nonzero(&self) -> bool {
        let total = self.bytes.len() * 8;
        (self.bit..total).any(|i| (self.bytes[i / 8] >> (7 - i % 8)) & 1 == 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(frames: usize) -> TokenStream {
        let row = |q: usize| (0..frames).map(|f| (f * 37 + q * 101) % 1024).collect();
        TokenStream::new(
            50,
            vec![
                BranchTokens::new(16_000, 10, (0..4).map(row).collect()).unwrap(),
                BranchTokens::new(32_000, 10, (4..8).map(row).collect()).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn default_sizes() {
        let s = stream(50);
        assert_eq!(s.header_len(), 31);
        assert_eq!(s.payload_bitrate(1), 2000.0);
        assert_eq!(s.payload_bitrate(2), 4000.0);
        assert_eq!(s.to_bytes().len(), 31 + 250 + 250);
        assert_eq!(s.branches[0].payload_bits(), 2000);
    }

    #[test]
    fn msb_first_packing() {
        let s = TokenStream::new(1, vec![BranchTokens::new(8, 3, vec![vec![0b101, 0b011, 0b111]]).unwrap()]).unwrap();
        let b = s.to_bytes();
        assert_eq!(&b[b.len() - 2..], &[0b1010_1111, 0b1000_0000]);
    }

    #[test]
    fn prefix_reads_low_branch_only() {
        let bytes = stream(7).to_bytes();
        let cut = &bytes[..31 + (4 * 7 * 10usize).div_ceil(8)];
        let p = TokenStream::from_bytes_prefix(cut, 1).unwrap();
        assert_eq!(p.branches, stream(7).branches[..1]);
        assert!(TokenStream::from_bytes(cut).is_err());
    }

    #[test]
    fn corrupt_headers_rejected() {
        let good = stream(5).to_bytes();
        let mut m = good.clone();
        m[0] = b'X';
        assert!(matches!(TokenStream::from_bytes(&m), Err(Error::Bitstream(_))));
        let mut v = good.clone();
        v[4] = 9;
        assert!(matches!(TokenStream::from_bytes(&v), Err(Error::Bitstream(_))));
        let mut bits = good.clone();
        bits[11 + 5] = 0;
        assert!(TokenStream::from_bytes(&bits).is_err());
        let mut frames = good.clone();
        frames[11 + 6] = 200;
        assert!(TokenStream::from_bytes(&frames).is_err());
        assert!(TokenStream::from_bytes(&good[..20]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(TokenStream::from_bytes(&long).is_err());
    }

    #[test]
    fn invalid_tokens_rejected() {
        assert!(matches!(
            BranchTokens::new(16_000, 3, vec![vec![8]]),
            Err(Error::InvalidToken { token: 8, size: 8, .. })
        ));
        assert!(BranchTokens::new(16_000, 3, vec![vec![1, 2], vec![3]]).is_err());
        assert!(BranchTokens::new(16_000, 0, vec![vec![0]]).is_err());
    }

    fn matrix() -> impl Strategy<Value = (u8, Vec<Vec<usize>>)> {
        (1u8..=16, 1usize..5, 0usize..40).prop_flat_map(|(bits, n_q, frames)| {
            let row = prop::collection::vec(0usize..(1 << bits), frames);
            (Just(bits), prop::collection::vec(row, n_q))
        })
    }

    proptest! {
        #[test]
        fn round_trip((bits, tokens) in matrix()) {
            let s = TokenStream::new(50, vec![BranchTokens::new(16_000, bits, tokens).unwrap()]).unwrap();
            let bytes = s.to_bytes();
            prop_assert_eq!(bytes.len(), 21 + (s.branches[0].payload_bits() as usize).div_ceil(8));
            let back = TokenStream::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
