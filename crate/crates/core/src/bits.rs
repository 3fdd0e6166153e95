//! Parallel bit extract/deposit with a portable fallback, and a
//! left-packing bit writer.

#[cfg(target_arch = "x86_64")]
use std::sync::OnceLock;

/// Gather the bits of `x` selected by `mask` into the low-order bits of the
/// result, preserving their relative order.
pub fn pext_portable(x: u64, mut mask: u64) -> u64 {
    let mut out = 0u64;
    let mut bit = 1u64;
    while mask != 0 {
        let low = mask & mask.wrapping_neg();
        if x & low != 0 {
            out |= bit;
        }
        bit <<= 1;
        mask ^= low;
    }
    out
}

/// Scatter the low-order bits of `x` to the positions selected by `mask`.
pub fn pdep_portable(x: u64, mut mask: u64) -> u64 {
    let mut out = 0u64;
    let mut bit = 1u64;
    while mask != 0 {
        let low = mask & mask.wrapping_neg();
        if x & bit != 0 {
            out |= low;
        }
        bit <<= 1;
        mask ^= low;
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "bmi2")]
unsafe fn pext_bmi2(x: u64, mask: u64) -> u64 {
    std::arch::x86_64::_pext_u64(x, mask)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "bmi2")]
unsafe fn pdep_bmi2(x: u64, mask: u64) -> u64 {
    std::arch::x86_64::_pdep_u64(x, mask)
}

#[cfg(target_arch = "x86_64")]
fn bmi2() -> bool {
    static HAS: OnceLock<bool> = OnceLock::new();
    *HAS.get_or_init(|| std::env::var_os("DSLICE_NO_BMI2").is_none() && is_x86_feature_detected!("bmi2"))
}

/// Whether the hardware extract instruction is in use.
pub fn hardware_accelerated() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        bmi2()
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[inline]
pub fn pext(x: u64, mask: u64) -> u64 {
    #[cfg(target_arch = "x86_64")]
    if bmi2() {
        // SAFETY: bmi2 support was detected at runtime.
        return unsafe { pext_bmi2(x, mask) };
    }
    pext_portable(x, mask)
}

#[inline]
pub fn pdep(x: u64, mask: u64) -> u64 {
    #[cfg(target_arch = "x86_64")]
    if bmi2() {
        // SAFETY: bmi2 support was detected at runtime.
        return unsafe { pdep_bmi2(x, mask) };
    }
    pdep_portable(x, mask)
}

/// Selects which extract implementation a caller runs.
pub trait Extract {
    fn pext(x: u64, mask: u64) -> u64;
}

pub struct Portable;
pub struct Native;

impl Extract for Portable {
    #[inline]
    fn pext(x: u64, mask: u64) -> u64 {
        pext_portable(x, mask)
    }
}

impl Extract for Native {
    #[inline]
    fn pext(x: u64, mask: u64) -> u64 {
        pext(x, mask)
    }
}

/// Appends bit runs to a word buffer, first bit at the MSB of word 0.
pub struct BitWriter<'a> {
    out: &'a mut [u64],
    pos: usize,
}

impl<'a> BitWriter<'a> {
    /// `out` must be zeroed by the caller.
    pub fn new(out: &'a mut [u64]) -> Self {
        BitWriter { out, pos: 0 }
    }

    /// Append the low `count` bits of `value` (count ≤ 64).
    #[inline]
    pub fn push(&mut self, value: u64, count: u32) {
        if count == 0 {
            return;
        }
        let aligned = value << (64 - count);
        let w = self.pos / 64;
        let used = (self.pos % 64) as u32;
        self.out[w] |= aligned >> used;
        if used + count > 64 {
            self.out[w + 1] |= aligned << (64 - used);
        }
        self.pos += count as usize;
    }

    pub fn bits_written(&self) -> usize {
        self.pos
    }
}

/// Read `count` bits (≤ 64) starting at bit `start` of a left-packed buffer.
#[inline]
pub fn read_bits(words: &[u64], start: usize, count: u32) -> u64 {
    if count == 0 {
        return 0;
    }
    let w = start / 64;
    let off = (start % 64) as u32;
    let hi = words.get(w).copied().unwrap_or(0) << off;
    let lo = if off == 0 { 0 } else { words.get(w + 1).copied().unwrap_or(0) >> (64 - off) };
    (hi | lo) >> (64 - count)
}

/// Load the big-endian word starting at byte `byte` of a key held as words.
#[inline]
pub fn word_at_byte(words: &[u64], byte: usize) -> u64 {
    let w = byte / 8;
    let sh = (byte % 8) as u32 * 8;
    let hi = words.get(w).copied().unwrap_or(0);
    if sh == 0 {
        hi
    } else {
        (hi << sh) | (words.get(w + 1).copied().unwrap_or(0) >> (64 - sh))
    }
}
