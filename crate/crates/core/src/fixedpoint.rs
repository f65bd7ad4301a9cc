//! Two's-complement fixed-point scalars and packed 32-bit SIMD words.
//!
//! Every operation saturates instead of wrapping. Right shifts are modeled as
//! a logarithmic barrel shifter: conditional stages of 1, 2, 4, 8 and 16 bit
//! positions that truncate into three guard bits plus a sticky bit, with a
//! single round-half-to-even step after the last stage.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Widest format the emulator accepts. Raw values live in `i64`, and the
/// internal accumulator formats add a few guard bits on top of FxP32.
pub const MAX_TOTAL_BITS: u32 = 62;

/// Barrel-shifter stage sizes. The sixth stage is only reachable by shift
/// amounts of 32 or more, which the wide internal formats need.
const SHIFT_STAGES: [u32; 6] = [1, 2, 4, 8, 16, 32];
const GUARD_BITS: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FixedError {
    #[error("invalid Q format: {total} total bits with {frac} fraction bits")]
    InvalidFormat { total: u32, frac: u32 },
    #[error("format mismatch: {0} vs {1}")]
    FormatMismatch(QFormat, QFormat),
    #[error("raw value {raw} does not fit in {format}")]
    RawOutOfRange { raw: i64, format: QFormat },
    #[error("lane configuration mismatch: {0:?} vs {1:?}")]
    LaneMismatch(LaneConfig, LaneConfig),
    #[error("expected {expected} lane operands, got {got}")]
    LaneCount { expected: usize, got: usize },
    #[error("lane {lane} is {expected} bits wide but the value is {got} bits")]
    LaneWidth { lane: usize, expected: u32, got: u32 },
}

/// Signed Q format: `total_bits` including the sign, `frac_bits` below the
/// binary point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QFormat {
    total_bits: u32,
    frac_bits: u32,
}

impl QFormat {
    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self, FixedError> {
        if !(2..=MAX_TOTAL_BITS).contains(&total_bits) || frac_bits >= total_bits {
            return Err(FixedError::InvalidFormat {
                total: total_bits,
                frac: frac_bits,
            });
        }
        Ok(Self {
            total_bits,
            frac_bits,
        })
    }

    /// Activation-function datapath: sign, two integer bits and the rest
    /// fraction. FxP4 keeps a single integer bit.
    pub fn af_datapath(bits: u32) -> Result<Self, FixedError> {
        match bits {
            4 => Self::new(4, 2),
            b if b >= 5 => Self::new(b, b - 3),
            b => Err(FixedError::InvalidFormat { total: b, frac: 0 }),
        }
    }

    /// MAC datapath: sign, three integer bits (covers the linear-rotation
    /// range of about +-7.97) and the rest fraction.
    pub fn mac_datapath(bits: u32) -> Result<Self, FixedError> {
        if bits < 4 {
            return Err(FixedError::InvalidFormat { total: bits, frac: 0 });
        }
        Self::new(bits, bits - 4)
    }

    pub fn total_bits(self) -> u32 {
        self.total_bits
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits
    }

    pub fn int_bits(self) -> u32 {
        self.total_bits - 1 - self.frac_bits
    }

    pub fn max_raw(self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    pub fn min_raw(self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    /// Weight of one least-significant bit.
    pub fn lsb(self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn max_value(self) -> f64 {
        self.max_raw() as f64 * self.lsb()
    }

    pub fn min_value(self) -> f64 {
        self.min_raw() as f64 * self.lsb()
    }

    pub fn contains_raw(self, raw: i64) -> bool {
        (self.min_raw()..=self.max_raw()).contains(&raw)
    }

    /// Same fraction bits, `extra` more integer bits.
    pub fn widened(self, extra: u32) -> Result<Self, FixedError> {
        Self::new(self.total_bits + extra, self.frac_bits)
    }

    fn saturate(self, raw: i128) -> i64 {
        raw.clamp(self.min_raw() as i128, self.max_raw() as i128) as i64
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q({},{})", self.total_bits, self.frac_bits)
    }
}

/// A fixed-point value: real value is `raw * 2^-frac_bits`, exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fxp {
    raw: i64,
    format: QFormat,
}

impl Fxp {
    pub fn from_raw(raw: i64, format: QFormat) -> Result<Self, FixedError> {
        if !format.contains_raw(raw) {
            return Err(FixedError::RawOutOfRange { raw, format });
        }
        Ok(Self { raw, format })
    }

    /// Clamps `raw` to the format rails.
    pub fn saturating_from_raw(raw: i128, format: QFormat) -> Self {
        Self {
            raw: format.saturate(raw),
            format,
        }
    }

    pub fn zero(format: QFormat) -> Self {
        Self { raw: 0, format }
    }

    pub fn max(format: QFormat) -> Self {
        Self {
            raw: format.max_raw(),
            format,
        }
    }

    pub fn min(format: QFormat) -> Self {
        Self {
            raw: format.min_raw(),
            format,
        }
    }

    pub fn raw(self) -> i64 {
        self.raw
    }

    pub fn format(self) -> QFormat {
        self.format
    }

    pub fn is_negative(self) -> bool {
        self.raw < 0
    }

    pub fn to_f64(self) -> f64 {
        dequantize(self)
    }

    /// Re-expresses the value in another format: rounds half-to-even when
    /// fraction bits are dropped, saturates when integer bits are dropped.
    pub fn convert(self, target: QFormat) -> Self {
        let from = self.format.frac_bits as i32;
        let to = target.frac_bits as i32;
        let shifted = if to >= from {
            (self.raw as i128) << (to - from)
        } else {
            round_shift_i128(self.raw as i128, (from - to) as u32)
        };
        Self::saturating_from_raw(shifted, target)
    }
}

impl fmt::Display for Fxp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (raw {} {})", self.to_f64(), self.raw, self.format)
    }
}

/// Saturating negation: -min clamps to max.
impl std::ops::Neg for Fxp {
    type Output = Fxp;

    fn neg(self) -> Fxp {
        Fxp::saturating_from_raw(-(self.raw as i128), self.format)
    }
}

/// Nearest representable value under round-half-to-even; saturates to the
/// rails on overflow. NaN maps to zero.
pub fn quantize(x: f64, format: QFormat) -> Fxp {
    if x.is_nan() {
        return Fxp::zero(format);
    }
    let scaled = (x * (format.frac_bits as f64).exp2()).round_ties_even();
    let raw = if scaled >= format.max_raw() as f64 {
        format.max_raw()
    } else if scaled <= format.min_raw() as f64 {
        format.min_raw()
    } else {
        scaled as i64
    };
    Fxp { raw, format }
}

pub fn dequantize(v: Fxp) -> f64 {
    v.raw as f64 * v.format.lsb()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AddSub {
    Add,
    Sub,
}

impl AddSub {
    /// `Add` for +1, `Sub` for -1: the CORDIC direction bit drives the
    /// Add_Sub control line directly.
    pub fn from_direction(d: i32) -> Self {
        if d >= 0 {
            AddSub::Add
        } else {
            AddSub::Sub
        }
    }
}

pub fn sat_add_sub(a: Fxp, b: Fxp, op: AddSub) -> Result<Fxp, FixedError> {
    if a.format != b.format {
        return Err(FixedError::FormatMismatch(a.format, b.format));
    }
    let wide = match op {
        AddSub::Add => a.raw as i128 + b.raw as i128,
        AddSub::Sub => a.raw as i128 - b.raw as i128,
    };
    Ok(Fxp::saturating_from_raw(wide, a.format))
}

/// Arithmetic right shift through the staged barrel shifter, rounded
/// half-to-even on the bits shifted out.
pub fn barrel_shift_right(v: Fxp, k: u32) -> Fxp {
    let k = k.min(63);
    let mut ext = (v.raw as i128) << GUARD_BITS;
    let mut sticky = false;
    for stage in SHIFT_STAGES {
        if k & stage != 0 {
            let lost = ext & ((1i128 << stage) - 1);
            sticky |= lost != 0;
            ext >>= stage;
        }
    }
    let raw = round_guarded(ext, sticky);
    Fxp::saturating_from_raw(raw, v.format)
}

/// Left shift with saturation (the shift-left stages of the MAC schedule).
pub fn barrel_shift_left(v: Fxp, k: u32) -> Fxp {
    if v.raw == 0 {
        return v;
    }
    let k = k.min(63);
    let wide = (v.raw as i128).checked_shl(k).unwrap_or(if v.raw < 0 {
        i128::MIN
    } else {
        i128::MAX
    });
    // Any bit pushed past the sign saturates, so compare against the rails
    // before the i128 itself could overflow.
    if k >= 64 {
        return if v.raw < 0 {
            Fxp::min(v.format)
        } else {
            Fxp::max(v.format)
        };
    }
    Fxp::saturating_from_raw(wide, v.format)
}

/// `ext` carries `GUARD_BITS` below the result LSB; `sticky` ORs everything
/// shifted further out.
fn round_guarded(ext: i128, sticky: bool) -> i128 {
    let q = ext >> GUARD_BITS;
    let guard = ext & ((1 << GUARD_BITS) - 1);
    let half = 1 << (GUARD_BITS - 1);
    let round_bit = guard & half != 0;
    let rest = (guard & (half - 1)) != 0 || sticky;
    if round_bit && (rest || q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

fn round_shift_i128(raw: i128, k: u32) -> i128 {
    if k == 0 {
        return raw;
    }
    if k >= 120 {
        return 0;
    }
    let q = raw >> k;
    let rem = raw - (q << k);
    let half = 1i128 << (k - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Lane layouts of the 32-bit datapath word, LSB-first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LaneConfig {
    L1x32,
    L2x16,
    L4x8,
    /// Eight 4-bit lanes per word. The sixteen-lane FxP4 issue is two words.
    L16x4,
    /// Two 12-bit lanes then two 4-bit lanes.
    H2x12_2x4,
    /// One 24-bit lane then two 4-bit lanes.
    H1x24_2x4,
}

impl LaneConfig {
    pub const ALL: [LaneConfig; 6] = [
        LaneConfig::L1x32,
        LaneConfig::L2x16,
        LaneConfig::L4x8,
        LaneConfig::L16x4,
        LaneConfig::H2x12_2x4,
        LaneConfig::H1x24_2x4,
    ];

    pub fn lane_widths(self) -> &'static [u32] {
        match self {
            LaneConfig::L1x32 => &[32],
            LaneConfig::L2x16 => &[16, 16],
            LaneConfig::L4x8 => &[8, 8, 8, 8],
            LaneConfig::L16x4 => &[4, 4, 4, 4, 4, 4, 4, 4],
            LaneConfig::H2x12_2x4 => &[12, 12, 4, 4],
            LaneConfig::H1x24_2x4 => &[24, 4, 4],
        }
    }

    pub fn lanes(self) -> usize {
        self.lane_widths().len()
    }

    /// Bit offset of each lane within the word.
    pub fn lane_offsets(self) -> Vec<u32> {
        self.lane_widths()
            .iter()
            .scan(0, |off, &w| {
                let here = *off;
                *off += w;
                Some(here)
            })
            .collect()
    }

    /// The uniform layout for a lane width, if there is one.
    pub fn uniform(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(LaneConfig::L1x32),
            16 => Some(LaneConfig::L2x16),
            8 => Some(LaneConfig::L4x8),
            4 => Some(LaneConfig::L16x4),
            _ => None,
        }
    }
}

const MAX_LANES: usize = 8;

/// One packed 32-bit datapath word plus the format of each lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SimdWord {
    raw: u32,
    lanes: LaneConfig,
    formats: [QFormat; MAX_LANES],
}

impl SimdWord {
    pub fn raw(&self) -> u32 {
        self.raw
    }

    pub fn lanes(&self) -> LaneConfig {
        self.lanes
    }

    pub fn formats(&self) -> &[QFormat] {
        &self.formats[..self.lanes.lanes()]
    }

    /// Reinterprets a raw bit pattern under a layout and per-lane formats.
    pub fn from_raw(raw: u32, lanes: LaneConfig, formats: &[QFormat]) -> Result<Self, FixedError> {
        check_formats(lanes, formats)?;
        let mut fs = [formats[0]; MAX_LANES];
        fs[..formats.len()].copy_from_slice(formats);
        Ok(Self {
            raw,
            lanes,
            formats: fs,
        })
    }

    /// Sign-extended lane value.
    pub fn lane(&self, i: usize) -> Fxp {
        let w = self.lanes.lane_widths()[i];
        let off = self.lanes.lane_offsets()[i];
        let field = ((self.raw as u64) >> off) & mask(0, w);
        let raw = ((field << (64 - w)) as i64) >> (64 - w);
        Fxp {
            raw,
            format: self.formats[i],
        }
    }
}

fn check_formats(lanes: LaneConfig, formats: &[QFormat]) -> Result<(), FixedError> {
    if formats.len() != lanes.lanes() {
        return Err(FixedError::LaneCount {
            expected: lanes.lanes(),
            got: formats.len(),
        });
    }
    for (lane, (f, &w)) in formats.iter().zip(lanes.lane_widths()).enumerate() {
        if f.total_bits != w {
            return Err(FixedError::LaneWidth {
                lane,
                expected: w,
                got: f.total_bits,
            });
        }
    }
    Ok(())
}

fn mask(offset: u32, width: u32) -> u64 {
    if width == 0 {
        0
    } else if width >= 64 {
        u64::MAX << offset
    } else {
        ((1u64 << width) - 1) << offset
    }
}

pub fn pack_lanes(values: &[Fxp], lanes: LaneConfig) -> Result<SimdWord, FixedError> {
    let formats: Vec<QFormat> = values.iter().map(|v| v.format).collect();
    check_formats(lanes, &formats)?;
    let mut raw = 0u64;
    for ((v, &w), off) in values.iter().zip(lanes.lane_widths()).zip(lanes.lane_offsets()) {
        raw |= ((v.raw as u64) & mask(0, w)) << off;
    }
    SimdWord::from_raw(raw as u32, lanes, &formats)
}

pub fn unpack_lanes(w: &SimdWord) -> Vec<Fxp> {
    (0..w.lanes.lanes()).map(|i| w.lane(i)).collect()
}

/// Packed add/sub over one ripple-carry chain. The carry is killed at each
/// lane boundary and a per-lane overflow (carry into the lane MSB differs
/// from carry out of it) saturates that lane.
pub fn simd_add_sub(a: &SimdWord, b: &SimdWord, ops: &[AddSub]) -> Result<SimdWord, FixedError> {
    if a.lanes != b.lanes {
        return Err(FixedError::LaneMismatch(a.lanes, b.lanes));
    }
    for (fa, fb) in a.formats().iter().zip(b.formats()) {
        if fa != fb {
            return Err(FixedError::FormatMismatch(*fa, *fb));
        }
    }
    let widths = a.lanes.lane_widths();
    if ops.len() != widths.len() {
        return Err(FixedError::LaneCount {
            expected: widths.len(),
            got: ops.len(),
        });
    }

    let mut sum = 0u32;
    let mut bit = 0u32;
    for (lane, &w) in widths.iter().enumerate() {
        let sub = ops[lane] == AddSub::Sub;
        // carry kill: each lane starts a fresh chain (carry-in = 1 for sub)
        let mut carry = sub as u32;
        let mut carry_into_msb = 0;
        let mut a_sign = 0;
        let msb = bit + w - 1;
        for _ in 0..w {
            let x = (a.raw >> bit) & 1;
            let y = ((b.raw >> bit) & 1) ^ sub as u32;
            if bit == msb {
                carry_into_msb = carry;
                a_sign = x;
            }
            sum |= (x ^ y ^ carry) << bit;
            carry = (x & y) | (x & carry) | (y & carry);
            bit += 1;
        }
        if carry_into_msb != carry {
            let off = bit - w;
            let lane_mask = mask(off, w) as u32;
            let rail = if a_sign == 0 {
                // 0111..1
                mask(off, w - 1) as u32
            } else {
                // 1000..0
                1u32 << (off + w - 1)
            };
            sum = (sum & !lane_mask) | rail;
        }
    }
    SimdWord::from_raw(sum, a.lanes, a.formats())
}

/// Packed logarithmic barrel shifter. Each lane is extended by three guard
/// bits inside a 64-bit internal word; every stage is a word-wide shift with
/// per-lane keep/fill masks (sign fill at the lane top) and per-lane sticky
/// capture, followed by one round-half-to-even per lane.
pub fn simd_barrel_shift(w: &SimdWord, k_per_lane: &[u32]) -> Result<SimdWord, FixedError> {
    let widths = w.lanes.lane_widths();
    if k_per_lane.len() != widths.len() {
        return Err(FixedError::LaneCount {
            expected: widths.len(),
            got: k_per_lane.len(),
        });
    }
    let fields: Vec<(u32, u32)> = widths
        .iter()
        .scan(0u32, |off, &lw| {
            let here = *off;
            *off += lw + GUARD_BITS;
            Some((here, lw + GUARD_BITS))
        })
        .collect();

    // spread lanes into the guarded internal word
    let mut ext = 0u64;
    for (i, &(eoff, _)) in fields.iter().enumerate() {
        let lw = widths[i];
        let off = w.lanes.lane_offsets()[i];
        let lane_bits = ((w.raw as u64) >> off) & mask(0, lw);
        ext |= lane_bits << (eoff + GUARD_BITS);
    }

    let mut sticky = 0u32;
    for stage in SHIFT_STAGES {
        let mut keep = 0u64;
        let mut fill = 0u64;
        let mut lost = 0u64;
        let mut untouched = 0u64;
        for (i, &(eoff, fw)) in fields.iter().enumerate() {
            if k_per_lane[i].min(63) & stage == 0 {
                untouched |= mask(eoff, fw);
                continue;
            }
            let sh = stage.min(fw);
            keep |= mask(eoff, fw - sh);
            lost |= mask(eoff, sh);
            let sign_set = (ext >> (eoff + fw - 1)) & 1 == 1;
            if sign_set {
                fill |= mask(eoff + fw - sh, sh);
            }
        }
        let dropped = ext & lost;
        for (i, &(eoff, fw)) in fields.iter().enumerate() {
            if dropped & mask(eoff, fw) != 0 {
                sticky |= 1 << i;
            }
        }
        let shifted = if stage >= 64 { 0 } else { ext >> stage };
        ext = (ext & untouched) | (shifted & keep) | fill;
    }

    let mut out = 0u64;
    for (i, &(eoff, fw)) in fields.iter().enumerate() {
        let field = (ext >> eoff) & mask(0, fw);
        let signed = ((field << (64 - fw)) as i64 >> (64 - fw)) as i128;
        let rounded = round_guarded(signed, sticky & (1 << i) != 0);
        let lw = widths[i];
        let off = w.lanes.lane_offsets()[i];
        out |= ((rounded as i64 as u64) & mask(0, lw)) << off;
    }
    SimdWord::from_raw(out as u32, w.lanes, w.formats())
}
