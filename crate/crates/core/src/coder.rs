//! Bit-exact range coder and discretized probability tables.
//!
//! The coder is a 32-bit range coder with byte-wise renormalization and
//! carry propagation through a cache byte. All probabilities are integer
//! counts summing to exactly `2^16`, so producing and consuming a stream is
//! integer-only and platform-deterministic. Symbols outside a table's window
//! are routed through an escape slot followed by 32 raw (bypass) bits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CodecError;
use crate::tensor::std_normal_cdf;

/// Probability resolution: all tables total `2^16` counts.
pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const RANGE_BOTTOM: u32 = 1 << 24;

/// Integerized CDF over the symbol window `[s_min, s_max]` plus an escape
/// slot at the end for out-of-window symbols.
#[derive(Clone, Debug)]
pub struct DiscreteCDF {
    s_min: i32,
    /// Cumulative counts; `cum[0] == 0`, `cum.last() == PROB_TOTAL`. The last
    /// interval is the escape slot.
    cum: Vec<u32>,
}

impl DiscreteCDF {
    /// Build from real-valued masses for each in-window symbol plus the
    /// escape tail (last entry). Counts are integerized by largest-remainder
    /// rounding; every in-window symbol gets at least one count so any symbol
    /// the window admits stays decodable. A zero escape mass keeps a zero
    /// count, which makes a true single-symbol alphabet possible.
    pub fn from_masses(s_min: i32, masses: &[f64]) -> Result<Self, CodecError> {
        let n = masses.len();
        if n < 2 {
            return Err(CodecError::BadHeader {
                offset: 0,
                detail: "CDF needs at least one symbol plus escape".into(),
            });
        }
        let escape = n - 1;
        let sum: f64 = masses.iter().map(|m| m.max(0.0)).sum();
        let norm = if sum > 0.0 { 1.0 / sum } else { 0.0 };
        let mut counts = vec![0u64; n];
        let mut remainders = vec![0.0f64; n];
        let mut total: u64 = 0;
        for i in 0..n {
            let mass = if sum > 0.0 {
                masses[i].max(0.0) * norm
            } else if i == escape {
                0.0
            } else {
                1.0 / (n - 1) as f64
            };
            let raw = mass * PROB_TOTAL as f64;
            let mut c = raw as u64;
            remainders[i] = raw - c as f64;
            // floor of one count for every in-window symbol; escape only
            // keeps a slot when it actually carries mass
            if c == 0 && (i != escape || masses[i] > 0.0) {
                c = 1;
                remainders[i] = 0.0;
            }
            counts[i] = c;
            total += c;
        }
        // distribute the leftover by largest remainder (ties: lowest index)
        while total < PROB_TOTAL as u64 {
            let mut best = 0usize;
            for i in 1..n {
                if remainders[i] > remainders[best] {
                    best = i;
                }
            }
            counts[best] += 1;
            remainders[best] = -1.0;
            total += 1;
            if remainders.iter().all(|&r| r < 0.0) {
                for (i, r) in remainders.iter_mut().enumerate() {
                    *r = if counts[i] > 0 { 0.0 } else { -1.0 };
                }
            }
        }
        // if rounding overshot, take counts back from the largest slots
        while total > PROB_TOTAL as u64 {
            let mut best = 0usize;
            for i in 1..n {
                if counts[i] > counts[best] {
                    best = i;
                }
            }
            debug_assert!(counts[best] > 1);
            counts[best] -= 1;
            total -= 1;
        }
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &c in &counts {
            acc += c as u32;
            cum.push(acc);
        }
        debug_assert_eq!(acc, PROB_TOTAL);
        Ok(DiscreteCDF { s_min, cum })
    }

    pub fn s_min(&self) -> i32 {
        self.s_min
    }

    pub fn s_max(&self) -> i32 {
        self.s_min + self.symbol_count() as i32 - 1
    }

    /// Number of in-window symbols (excluding the escape slot).
    pub fn symbol_count(&self) -> usize {
        self.cum.len() - 2
    }

    fn escape_slot(&self) -> usize {
        self.cum.len() - 2
    }

    fn slot_range(&self, slot: usize) -> (u32, u32) {
        (self.cum[slot], self.cum[slot + 1] - self.cum[slot])
    }

    /// Slot for a symbol; `None` means out of window (escape).
    fn slot_of(&self, symbol: i32) -> Option<usize> {
        if symbol < self.s_min || symbol > self.s_max() {
            None
        } else {
            Some((symbol - self.s_min) as usize)
        }
    }

    /// Largest slot whose cumulative start is `<= f`.
    fn find_slot(&self, f: u32) -> usize {
        let mut lo = 0usize;
        let mut hi = self.cum.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= f {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn total(&self) -> u32 {
        *self.cum.last().unwrap()
    }

    pub fn count_of_slot(&self, slot: usize) -> u32 {
        self.cum[slot + 1] - self.cum[slot]
    }
}

/// Gaussian integerized to a [`DiscreteCDF`] over `[s_min, s_max]`:
/// `P(k) ~ Phi((k + 1/2 - mean)/scale) - Phi((k - 1/2 - mean)/scale)` with the
/// two tails folded into the escape slot.
pub fn gaussian_cdf_table(
    mean: f64,
    scale: f64,
    s_min: i32,
    s_max: i32,
) -> Result<DiscreteCDF, CodecError> {
    if s_min > s_max || scale <= 0.0 {
        return Err(CodecError::BadHeader {
            offset: 0,
            detail: format!("bad gaussian table request: [{s_min}, {s_max}], scale {scale}"),
        });
    }
    let n = (s_max - s_min + 1) as usize;
    let mut masses = Vec::with_capacity(n + 1);
    let mut prev = std_normal_cdf((s_min as f64 - 0.5 - mean) / scale);
    let tail_lo = prev;
    for k in s_min..=s_max {
        let hi = std_normal_cdf((k as f64 + 0.5 - mean) / scale);
        masses.push((hi - prev).max(0.0));
        prev = hi;
    }
    let tail_hi = 1.0 - prev;
    masses.push((tail_lo + tail_hi).max(1e-9));
    DiscreteCDF::from_masses(s_min, &masses)
}

/// Range encoder with carry counting (cache byte plus pending 0xFF run).
#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    fn renorm(&mut self) {
        while self.range < RANGE_BOTTOM {
            self.shift_low();
            self.range <<= 8;
        }
    }

    /// Encode an interval `[cum, cum + freq)` out of [`PROB_TOTAL`]. The top
    /// interval absorbs the division remainder so no probability mass is lost.
    fn encode_interval(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low += r as u64 * cum as u64;
        self.range = if cum + freq == PROB_TOTAL {
            self.range - r * cum
        } else {
            r * freq
        };
        self.renorm();
    }

    /// Encode a raw bit at probability one half.
    pub fn encode_bypass_bit(&mut self, bit: bool) {
        let r = self.range >> 1;
        if bit {
            self.low += r as u64;
            self.range -= r;
        } else {
            self.range = r;
        }
        self.renorm();
    }

    pub fn encode_bypass_bits(&mut self, value: u32, bits: u32) {
        for i in (0..bits).rev() {
            self.encode_bypass_bit((value >> i) & 1 == 1);
        }
    }

    /// Encode one symbol under `cdf`; out-of-window symbols are escaped and
    /// followed by the raw 32-bit value.
    pub fn encode_symbol(&mut self, cdf: &DiscreteCDF, symbol: i32) -> Result<(), CodecError> {
        match cdf.slot_of(symbol) {
            Some(slot) => {
                let (cum, freq) = cdf.slot_range(slot);
                self.encode_interval(cum, freq);
                Ok(())
            }
            None => {
                let (cum, freq) = cdf.slot_range(cdf.escape_slot());
                if freq == 0 {
                    return Err(CodecError::Corrupt {
                        offset: self.out.len(),
                        detail: format!("symbol {symbol} outside window and escape is empty"),
                    });
                }
                self.encode_interval(cum, freq);
                self.encode_bypass_bits(symbol as u32, 32);
                Ok(())
            }
        }
    }

    /// Flush the final state; the stream gains five bytes of tail.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }

    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }
}

/// Range decoder over a byte slice. Reads past the end decode as zero bytes,
/// which matches the encoder's flush; container formats carry explicit
/// lengths so real truncation is caught before decoding starts.
#[derive(Debug)]
pub struct RangeDecoder<'a> {
    range: u32,
    code: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            range: u32::MAX,
            code: 0,
            buf,
            pos: 1, // the first byte is always the encoder's zero cache
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.buf.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn renorm(&mut self) {
        while self.range < RANGE_BOTTOM {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }

    fn decode_freq(&mut self) -> (u32, u32) {
        let r = self.range >> PROB_BITS;
        // the top interval absorbs the division remainder, so a code landing
        // in that zone maps to the last frequency
        let f = (self.code / r).min(PROB_TOTAL - 1);
        (r, f)
    }

    fn consume(&mut self, r: u32, cum: u32, freq: u32) {
        self.code -= r * cum;
        self.range = if cum + freq == PROB_TOTAL {
            self.range - r * cum
        } else {
            r * freq
        };
        self.renorm();
    }

    pub fn decode_bypass_bit(&mut self) -> bool {
        let r = self.range >> 1;
        let bit = self.code >= r;
        if bit {
            self.code -= r;
            self.range -= r;
        } else {
            self.range = r;
        }
        self.renorm();
        bit
    }

    pub fn decode_bypass_bits(&mut self, bits: u32) -> u32 {
        let mut v = 0u32;
        for _ in 0..bits {
            v = (v << 1) | self.decode_bypass_bit() as u32;
        }
        v
    }

    pub fn decode_symbol(&mut self, cdf: &DiscreteCDF) -> Result<i32, CodecError> {
        let (r, f) = self.decode_freq();
        let slot = cdf.find_slot(f);
        let (cum, freq) = cdf.slot_range(slot);
        if freq == 0 {
            // only reachable on a corrupt stream: the escape slot of a
            // zero-tail table has no width
            return Err(CodecError::Corrupt {
                offset: self.pos,
                detail: "decoded frequency outside table".into(),
            });
        }
        self.consume(r, cum, freq);
        if slot == cdf.escape_slot() {
            Ok(self.decode_bypass_bits(32) as i32)
        } else {
            Ok(cdf.s_min + slot as i32)
        }
    }
}

/// Non-differentiable convenience: summed ideal code length (bits) of symbols
/// under per-position Gaussians, matching [`crate::nn::gaussian_bits`].
pub fn ideal_gaussian_bits(values: &[f64], means: &[f64], scales: &[f64], step: f64) -> f64 {
    values
        .iter()
        .zip(means)
        .zip(scales)
        .map(|((&v, &m), &s)| {
            let hi = std_normal_cdf((v + 0.5 * step - m) / s);
            let lo = std_normal_cdf((v - 0.5 * step - m) / s);
            -libm::log2((hi - lo).max(1e-12))
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn roundtrip(symbols: &[i32], cdfs: &[DiscreteCDF]) {
        let mut enc = RangeEncoder::new();
        for (s, cdf) in symbols.iter().zip(cdfs) {
            enc.encode_symbol(cdf, *s).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for (s, cdf) in symbols.iter().zip(cdfs) {
            assert_eq!(dec.decode_symbol(cdf).unwrap(), *s);
        }
    }

    #[test]
    fn cdf_counts_sum_to_total() {
        let mut rng = Rng::new(12);
        for _ in 0..1000 {
            let mean = rng.uniform(-20.0, 20.0);
            let scale = libm::exp(rng.uniform(-3.0, 3.0));
            let cdf = gaussian_cdf_table(mean, scale, -32, 31).unwrap();
            assert_eq!(cdf.total(), PROB_TOTAL);
            for slot in 0..cdf.symbol_count() {
                assert!(cdf.count_of_slot(slot) >= 1);
            }
        }
    }

    #[test]
    fn gaussian_symmetry_before_integerization() {
        // with zero mean, P(k) == P(-k) analytically
        for k in 1..5 {
            let hi = std_normal_cdf(k as f64 + 0.5) - std_normal_cdf(k as f64 - 0.5);
            let lo = std_normal_cdf(-(k as f64) + 0.5) - std_normal_cdf(-(k as f64) - 0.5);
            assert!((hi - lo).abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_center_mass_reference() {
        // P(0) for the unit gaussian with unit step
        let p = std_normal_cdf(0.5) - std_normal_cdf(-0.5);
        assert!((p - 0.3829).abs() < 1e-4);
    }

    #[test]
    fn random_roundtrip_fuzz() {
        let mut rng = Rng::new(999);
        for seed in 0..100u64 {
            let mut local = Rng::new(seed);
            let n_cdfs = 1 + local.below(4);
            let cdf_pool: Vec<DiscreteCDF> = (0..n_cdfs)
                .map(|_| {
                    let mean = local.uniform(-10.0, 10.0);
                    let scale = libm::exp(local.uniform(-2.0, 2.5));
                    gaussian_cdf_table(mean, scale, -24, 24).unwrap()
                })
                .collect();
            let len = 1 + local.below(500);
            let symbols: Vec<i32> = (0..len)
                .map(|_| (rng.uniform(-40.0, 40.0)) as i32)
                .collect();
            let cdfs: Vec<DiscreteCDF> = (0..len)
                .map(|i| cdf_pool[i % cdf_pool.len()].clone())
                .collect();
            roundtrip(&symbols, &cdfs);
        }
    }

    #[test]
    fn zero_entropy_source_is_free() {
        // single-symbol alphabet with all mass on that symbol
        let cdf = DiscreteCDF::from_masses(7, &[1.0, 0.0]).unwrap();
        let mut enc = RangeEncoder::new();
        for _ in 0..100_000 {
            enc.encode_symbol(&cdf, 7).unwrap();
        }
        let bytes = enc.finish();
        assert!(bytes.len() * 8 <= 40, "got {} bits", bytes.len() * 8);
        let mut dec = RangeDecoder::new(&bytes);
        for _ in 0..100_000 {
            assert_eq!(dec.decode_symbol(&cdf).unwrap(), 7);
        }
    }

    #[test]
    fn uniform_source_overhead_under_one_percent() {
        let masses = vec![1.0 / 256.0; 256]
            .into_iter()
            .chain(core::iter::once(0.0))
            .collect::<Vec<_>>();
        let cdf = DiscreteCDF::from_masses(0, &masses).unwrap();
        let mut rng = Rng::new(4242);
        let symbols: Vec<i32> = (0..4096).map(|_| rng.below(256) as i32).collect();
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            enc.encode_symbol(&cdf, s).unwrap();
        }
        let bytes = enc.finish();
        let actual_bits = bytes.len() as f64 * 8.0;
        let ideal_bits = 4096.0 * 8.0;
        assert!(actual_bits < ideal_bits * 1.01, "{actual_bits} vs {ideal_bits}");
        let mut dec = RangeDecoder::new(&bytes);
        for &s in &symbols {
            assert_eq!(dec.decode_symbol(&cdf).unwrap(), s);
        }
    }

    #[test]
    fn escape_roundtrips_extreme_symbols() {
        let cdf = gaussian_cdf_table(0.0, 1.0, -8, 8).unwrap();
        let symbols = [0, 3, -700, 12_345, -8, 8, i32::MAX, i32::MIN + 1];
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            enc.encode_symbol(&cdf, s).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &s in &symbols {
            assert_eq!(dec.decode_symbol(&cdf).unwrap(), s);
        }
    }

    #[test]
    fn bypass_bits_roundtrip() {
        let mut enc = RangeEncoder::new();
        enc.encode_bypass_bits(0xDEAD_BEEF, 32);
        enc.encode_bypass_bits(0b101, 3);
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        assert_eq!(dec.decode_bypass_bits(32), 0xDEAD_BEEF);
        assert_eq!(dec.decode_bypass_bits(3), 0b101);
    }

    #[test]
    fn rejects_invalid_table_request() {
        assert!(gaussian_cdf_table(0.0, 1.0, 5, 4).is_err());
        assert!(gaussian_cdf_table(0.0, -1.0, -4, 4).is_err());
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn arbitrary_alphabets_roundtrip(
            seed in 0u64..10_000,
            n_symbols in 1usize..40,
            len in 1usize..300,
        ) {
            let mut rng = Rng::new(seed);
            // random positive masses plus a possible escape tail
            let mut masses: alloc::vec::Vec<f64> =
                (0..n_symbols).map(|_| rng.uniform(1e-6, 1.0)).collect();
            masses.push(if rng.coin() { rng.uniform(0.0, 0.2) } else { 0.0 });
            let s_min = (rng.uniform(-50.0, 50.0)) as i32;
            let cdf = DiscreteCDF::from_masses(s_min, &masses).unwrap();
            prop_assert_eq!(cdf.total(), PROB_TOTAL);

            let has_escape = cdf.count_of_slot(cdf.symbol_count()) > 0;
            let symbols: alloc::vec::Vec<i32> = (0..len)
                .map(|_| {
                    if has_escape && rng.below(10) == 0 {
                        (rng.uniform(-1e4, 1e4)) as i32
                    } else {
                        s_min + rng.below(n_symbols) as i32
                    }
                })
                .collect();
            let mut enc = RangeEncoder::new();
            for &s in &symbols {
                enc.encode_symbol(&cdf, s).unwrap();
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes);
            for &s in &symbols {
                prop_assert_eq!(dec.decode_symbol(&cdf).unwrap(), s);
            }
        }
    }
}
