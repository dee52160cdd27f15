//! Binary sub-band occupancy masks.
//!
//! A [`SubbandMask`] describes either the interference state (which
//! sub-bands the communications system occupies) or a radar action (which
//! sub-bands the chirp sweeps). Bits are packed into a `u32`, bit `i`
//! corresponding to sub-band `i` counted from the low edge of the channel.

use std::fmt;
use std::str::FromStr;

use crate::error::EnvError;

/// Largest supported number of sub-bands.
pub const MAX_SUBBANDS: usize = 32;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubbandMask {
    bits: u32,
    len: u8,
}

impl SubbandMask {
    /// All-zero mask of `len` sub-bands.
    pub fn empty(len: usize) -> Self {
        assert!(
            (1..=MAX_SUBBANDS).contains(&len),
            "mask length {len} outside 1..={MAX_SUBBANDS}"
        );
        Self { bits: 0, len: len as u8 }
    }

    /// All-ones mask of `len` sub-bands.
    pub fn full(len: usize) -> Self {
        let mut m = Self::empty(len);
        m.bits = low_bits(len);
        m
    }

    /// Mask with exactly one sub-band set.
    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut m = Self::empty(len);
        m.set(index, true);
        m
    }

    /// Mask with the half-open run `start..start + run` set.
    pub fn run(len: usize, start: usize, run: usize) -> Self {
        assert!(start + run <= len, "run {start}+{run} exceeds length {len}");
        let mut m = Self::empty(len);
        m.bits = low_bits(run) << start;
        m
    }

    pub fn from_bits(len: usize, bits: u32) -> Self {
        let mut m = Self::empty(len);
        m.bits = bits & low_bits(len);
        m
    }

    /// Builds a mask from a slice of 0/1 values.
    pub fn from_slice(values: &[u8]) -> Result<Self, EnvError> {
        if values.is_empty() || values.len() > MAX_SUBBANDS {
            return Err(EnvError::InvalidMask(format!(
                "length {} outside 1..={MAX_SUBBANDS}",
                values.len()
            )));
        }
        let mut m = Self::empty(values.len());
        for (i, &v) in values.iter().enumerate() {
            match v {
                0 => {}
                1 => m.set(i, true),
                other => {
                    return Err(EnvError::InvalidMask(format!(
                        "non-binary value {other} at position {i}"
                    )))
                }
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn is_full(&self) -> bool {
        self.bits == low_bits(self.len())
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len(), "index {i} out of range for mask of {}", self.len);
        self.bits >> i & 1 == 1
    }

    pub fn set(&mut self, i: usize, on: bool) {
        assert!(i < self.len(), "index {i} out of range for mask of {}", self.len);
        if on {
            self.bits |= 1 << i;
        } else {
            self.bits &= !(1 << i);
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Positionwise AND. Panics on length mismatch; callers validate first.
    pub fn and(&self, other: &Self) -> Self {
        assert_eq!(self.len, other.len);
        Self { bits: self.bits & other.bits, len: self.len }
    }

    /// True when the set bits form exactly one non-empty contiguous run.
    pub fn is_contiguous_run(&self) -> bool {
        if self.bits == 0 {
            return false;
        }
        let shifted = self.bits >> self.bits.trailing_zeros();
        shifted & (shifted + 1) == 0
    }

    /// `(start, length)` of the set run for contiguous masks.
    pub fn run_bounds(&self) -> Option<(usize, usize)> {
        self.is_contiguous_run()
            .then(|| (self.bits.trailing_zeros() as usize, self.count_ones()))
    }

    /// Compact `"11000"` rendering used in tables and LUT files.
    pub fn to_bit_string(&self) -> String {
        self.iter().map(|b| if b { '1' } else { '0' }).collect()
    }

    /// Comma-separated `"1,1,0,0,0"` rendering used by trace files.
    pub fn to_csv_row(&self) -> String {
        let cells: Vec<&str> = self.iter().map(|b| if b { "1" } else { "0" }).collect();
        cells.join(",")
    }

    pub(crate) fn check_same_len(&self, other: &Self) -> Result<(), EnvError> {
        if self.len != other.len {
            return Err(EnvError::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(())
    }
}

fn low_bits(n: usize) -> u32 {
    if n >= 32 {
        u32::MAX
    } else {
        (1u32 << n) - 1
    }
}

impl fmt::Debug for SubbandMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.to_csv_row())
    }
}

impl fmt::Display for SubbandMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

/// Parses either `"1,1,0,0,0"` or `"11000"`.
impl FromStr for SubbandMask {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let tokens: Vec<&str> = if s.contains(',') {
            s.split(',').map(str::trim).collect()
        } else {
            s.split("").filter(|t| !t.is_empty()).collect()
        };
        let mut values = Vec::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            match *t {
                "0" => values.push(0),
                "1" => values.push(1),
                other => {
                    return Err(EnvError::InvalidMask(format!(
                        "token {other:?} at position {i} is not 0 or 1"
                    )))
                }
            }
        }
        Self::from_slice(&values)
    }
}
