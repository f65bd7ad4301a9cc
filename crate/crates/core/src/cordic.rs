//! Unified CORDIC recurrence in hyperbolic-rotation (HR), linear-vectoring
//! (LV, division) and linear-rotation (LR, multiply-accumulate) modes.
//!
//! ```text
//! X[i+1] = X[i] - m * d[i] * Y[i] * 2^-i
//! Y[i+1] = Y[i] + d[i] * X[i] * 2^-i
//! Z[i+1] = Z[i] - d[i] * E[i]
//! ```
//!
//! Shifts go through [`barrel_shift_right`], adds through [`sat_add_sub`].
//! Negative stage indices (the first LR stages) shift left instead.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{
    barrel_shift_left, barrel_shift_right, quantize, sat_add_sub, AddSub, FixedError, Fxp,
    QFormat,
};

/// Hyperbolic gain.
pub const KH: f64 = 0.8281;
/// Pre-scale loaded into X for HR mode.
pub const INV_KH: f64 = 1.2074;
/// Circular gain. Kept for completeness; circular mode is not implemented.
pub const KC: f64 = 1.6467;
pub const HR_RANGE: f64 = 1.1182;
pub const LV_RANGE: f64 = 1.0;
pub const LR_RANGE: f64 = 7.968;
/// Pre-activation normalization bound applied before the AF.
pub const MAX_NORM: f64 = 5.5;
/// First stage index of the MAC schedule (a left shift by two).
pub const LR_FIRST_STAGE: i32 = -2;
/// Extra integer bits carried by the LR datapath so intermediate Y values
/// (up to |acc| + |a| * 8) never clip before the final result.
pub const LR_GUARD_BITS: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CordicError {
    #[error("{what} = {value} is outside the {mode} convergence range (limit {limit})")]
    Range {
        mode: &'static str,
        what: &'static str,
        value: f64,
        limit: f64,
    },
    #[error("stage {index} is not covered by the angle table")]
    Stage { index: i32 },
    #[error("invalid mode: hyperbolic coordinates only support rotation")]
    Mode,
    #[error("unsupported precision {0}; expected 4, 8, 16 or 32")]
    UnsupportedPrecision(u32),
    #[error("invalid stage plan: {hyperbolic} hyperbolic / {linear} linear stages at {precision} bits")]
    Plan {
        hyperbolic: u32,
        linear: u32,
        precision: u32,
    },
    #[error("operands must share one format: {0} vs {1}")]
    FormatMismatch(QFormat, QFormat),
    #[error(transparent)]
    Fixed(#[from] FixedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coordinate {
    /// m = -1
    Hyperbolic,
    /// m = 0
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Rotation,
    Vectoring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CordicMode {
    coordinate: Coordinate,
    direction: Direction,
}

impl CordicMode {
    pub const HR: CordicMode = CordicMode {
        coordinate: Coordinate::Hyperbolic,
        direction: Direction::Rotation,
    };
    pub const LV: CordicMode = CordicMode {
        coordinate: Coordinate::Linear,
        direction: Direction::Vectoring,
    };
    pub const LR: CordicMode = CordicMode {
        coordinate: Coordinate::Linear,
        direction: Direction::Rotation,
    };

    pub fn new(coordinate: Coordinate, direction: Direction) -> Result<Self, CordicError> {
        if coordinate == Coordinate::Hyperbolic && direction == Direction::Vectoring {
            return Err(CordicError::Mode);
        }
        Ok(Self {
            coordinate,
            direction,
        })
    }

    pub fn coordinate(self) -> Coordinate {
        self.coordinate
    }

    pub fn direction(self) -> Direction {
        self.direction
    }

    pub fn m(self) -> i32 {
        match self.coordinate {
            Coordinate::Hyperbolic => -1,
            Coordinate::Linear => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match (self.coordinate, self.direction) {
            (Coordinate::Hyperbolic, _) => "HR",
            (Coordinate::Linear, Direction::Vectoring) => "LV",
            (Coordinate::Linear, Direction::Rotation) => "LR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleKind {
    /// E_i = atanh(2^-i)
    Hyperbolic,
    /// E_i = 2^-i
    Linear,
}

impl AngleKind {
    pub fn real(self, i: i32) -> f64 {
        let p = (-(i as f64)).exp2();
        match self {
            AngleKind::Hyperbolic => p.atanh(),
            AngleKind::Linear => p,
        }
    }
}

/// Quantized E_i for a contiguous run of stage indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AngleTable {
    kind: AngleKind,
    first: i32,
    entries: Vec<Fxp>,
}

impl AngleTable {
    /// Stages 1..=n.
    pub fn hyperbolic(n: u32, format: QFormat) -> Self {
        Self::new(AngleKind::Hyperbolic, 1, n, format).expect("hyperbolic stages start at 1")
    }

    pub fn linear(first: i32, n: u32, format: QFormat) -> Self {
        Self::new(AngleKind::Linear, first, n, format).expect("linear tables accept any start")
    }

    pub fn new(kind: AngleKind, first: i32, n: u32, format: QFormat) -> Result<Self, CordicError> {
        if kind == AngleKind::Hyperbolic && first < 1 {
            return Err(CordicError::Stage { index: first });
        }
        let entries = (0..n as i32)
            .map(|k| quantize(kind.real(first + k), format))
            .collect();
        Ok(Self {
            kind,
            first,
            entries,
        })
    }

    pub fn kind(&self) -> AngleKind {
        self.kind
    }

    pub fn first_stage(&self) -> i32 {
        self.first
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: i32) -> Option<Fxp> {
        let k = i.checked_sub(self.first)?;
        usize::try_from(k).ok().and_then(|k| self.entries.get(k).copied())
    }

    pub fn entries(&self) -> &[Fxp] {
        &self.entries
    }
}

/// CSV of E_i, real and raw in each given format.
pub fn angle_table_csv(kind: AngleKind, first: i32, n: u32, formats: &[QFormat]) -> String {
    let mut out = String::from("stage,e_real");
    for f in formats {
        let _ = write!(out, ",raw_q{}_{}", f.total_bits(), f.frac_bits());
    }
    out.push('\n');
    for i in first..first + n as i32 {
        let e = kind.real(i);
        let _ = write!(out, "{i},{e:.12}");
        for f in formats {
            let _ = write!(out, ",{}", quantize(e, *f).raw());
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CordicState {
    pub x: Fxp,
    pub y: Fxp,
    pub z: Fxp,
    /// Index of the next stage to apply.
    pub stage_index: i32,
}

impl CordicState {
    pub fn new(x: Fxp, y: Fxp, z: Fxp, stage_index: i32) -> Result<Self, CordicError> {
        for other in [y.format(), z.format()] {
            if other != x.format() {
                return Err(CordicError::FormatMismatch(x.format(), other));
            }
        }
        Ok(Self {
            x,
            y,
            z,
            stage_index,
        })
    }

    pub fn format(&self) -> QFormat {
        self.x.format()
    }
}

/// One row of an iteration trace: state after `stage`, and the direction
/// used to get there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceRow {
    pub stage: i32,
    pub d: i8,
    pub x: Fxp,
    pub y: Fxp,
    pub z: Fxp,
}

fn sign(v: Fxp) -> i8 {
    if v.is_negative() {
        -1
    } else {
        1
    }
}

/// d = sign(Z) for rotation, -sign(X)*sign(Y) for vectoring; sign(0) = +1.
pub fn direction(s: &CordicState, mode: CordicMode) -> i8 {
    match mode.direction {
        Direction::Rotation => sign(s.z),
        Direction::Vectoring => -sign(s.x) * sign(s.y),
    }
}

fn shift(v: Fxp, i: i32) -> Fxp {
    if i >= 0 {
        barrel_shift_right(v, i as u32)
    } else {
        barrel_shift_left(v, i.unsigned_abs())
    }
}

pub fn cordic_step(
    s: &CordicState,
    mode: CordicMode,
    table: &AngleTable,
) -> Result<CordicState, CordicError> {
    cordic_step_traced(s, mode, table).map(|(next, _)| next)
}

/// Like [`cordic_step`], also returning d.
pub fn cordic_step_traced(
    s: &CordicState,
    mode: CordicMode,
    table: &AngleTable,
) -> Result<(CordicState, i8), CordicError> {
    let i = s.stage_index;
    let e = table.entry(i).ok_or(CordicError::Stage { index: i })?;
    let e = if e.format() == s.format() {
        e
    } else {
        quantize(table.kind.real(i), s.format())
    };
    let d = direction(s, mode);
    let along = AddSub::from_direction(d as i32);
    let against = AddSub::from_direction(-(d as i32));

    let x = match mode.coordinate {
        Coordinate::Hyperbolic => sat_add_sub(s.x, shift(s.y, i), along)?,
        Coordinate::Linear => s.x,
    };
    let y = sat_add_sub(s.y, shift(s.x, i), along)?;
    let z = sat_add_sub(s.z, e, against)?;
    Ok((
        CordicState {
            x,
            y,
            z,
            stage_index: i + 1,
        },
        d,
    ))
}

/// Largest |Z| (rotation) the mode converges for when starting at `first`.
fn rotation_limit(mode: CordicMode, first: i32) -> f64 {
    match (mode.coordinate, first) {
        (Coordinate::Hyperbolic, _) => HR_RANGE,
        (Coordinate::Linear, LR_FIRST_STAGE) => LR_RANGE,
        (Coordinate::Linear, 1) => LV_RANGE,
        (Coordinate::Linear, f) => (1.0 - f as f64).exp2(),
    }
}

/// `|v| <= limit`, with the limit itself quantized into v's format so a
/// value saturated to the rail always passes.
fn within(v: Fxp, limit: f64) -> bool {
    v.raw().unsigned_abs() <= quantize(limit, v.format()).raw().unsigned_abs()
}

fn check_range(init: &CordicState, mode: CordicMode) -> Result<(), CordicError> {
    match mode.direction {
        Direction::Rotation => {
            let limit = rotation_limit(mode, init.stage_index);
            if !within(init.z, limit) {
                return Err(CordicError::Range {
                    mode: mode.name(),
                    what: "z",
                    value: init.z.to_f64(),
                    limit,
                });
            }
        }
        Direction::Vectoring => {
            if init.x.raw() <= 0 {
                return Err(CordicError::Range {
                    mode: mode.name(),
                    what: "denominator",
                    value: init.x.to_f64(),
                    limit: 0.0,
                });
            }
            if init.y.raw().unsigned_abs() > init.x.raw().unsigned_abs() {
                return Err(CordicError::Range {
                    mode: mode.name(),
                    what: "quotient",
                    value: init.y.to_f64() / init.x.to_f64(),
                    limit: LV_RANGE,
                });
            }
        }
    }
    Ok(())
}

fn table_for(mode: CordicMode, first: i32, n: u32, f: QFormat) -> Result<AngleTable, CordicError> {
    let kind = match mode.coordinate {
        Coordinate::Hyperbolic => AngleKind::Hyperbolic,
        Coordinate::Linear => AngleKind::Linear,
    };
    AngleTable::new(kind, first, n, f)
}

/// `n_stages` steps starting at `init.stage_index` (1 for HR/LV).
pub fn run_iterative(
    init: &CordicState,
    mode: CordicMode,
    n_stages: u32,
) -> Result<CordicState, CordicError> {
    run_traced(init, mode, n_stages).map(|(s, _)| s)
}

pub fn run_traced(
    init: &CordicState,
    mode: CordicMode,
    n_stages: u32,
) -> Result<(CordicState, Vec<TraceRow>), CordicError> {
    check_range(init, mode)?;
    let table = table_for(mode, init.stage_index, n_stages, init.format())?;
    let mut s = *init;
    let mut rows = Vec::with_capacity(n_stages as usize);
    for _ in 0..n_stages {
        let stage = s.stage_index;
        let (next, d) = cordic_step_traced(&s, mode, &table)?;
        s = next;
        rows.push(TraceRow {
            stage,
            d,
            x: s.x,
            y: s.y,
            z: s.z,
        });
    }
    Ok((s, rows))
}

/// HR mode from (1/Kh, 0, z). Returns (cosh, sinh) in z's format.
pub fn hr_sinh_cosh(z: Fxp, stages: u32) -> Result<(Fxp, Fxp), CordicError> {
    let s = hr_init(z)?;
    let out = run_iterative(&s, CordicMode::HR, stages)?;
    Ok((out.x, out.y))
}

pub fn hr_init(z: Fxp) -> Result<CordicState, CordicError> {
    let f = z.format();
    CordicState::new(quantize(INV_KH, f), Fxp::zero(f), z, 1)
}

/// LV mode from (denom, num, 0). Returns Z, approximately num / denom.
pub fn lv_divide(num: Fxp, denom: Fxp, stages: u32) -> Result<Fxp, CordicError> {
    let s = CordicState::new(denom, num, Fxp::zero(num.format()), 1)?;
    Ok(run_iterative(&s, CordicMode::LV, stages)?.z)
}

/// LR mode from (a, acc, z) over stages -2, -1, 0, 1, ..: returns
/// acc + a*z. X and Y run with extra integer guard bits; only the final Y
/// saturates back to the operand format.
pub fn lr_mac(a: Fxp, z: Fxp, acc: Fxp, stages: u32) -> Result<Fxp, CordicError> {
    let f = a.format();
    for other in [z.format(), acc.format()] {
        if other != f {
            return Err(CordicError::FormatMismatch(f, other));
        }
    }
    if !within(z, LR_RANGE) {
        return Err(CordicError::Range {
            mode: "LR",
            what: "z",
            value: z.to_f64(),
            limit: LR_RANGE,
        });
    }
    let wide = f.widened(LR_GUARD_BITS)?;
    let s = CordicState::new(a.convert(wide), acc.convert(wide), z.convert(wide), LR_FIRST_STAGE)?;
    let out = run_iterative(&s, CordicMode::LR, stages)?;
    Ok(out.y.convert(f))
}

/// The same recurrence in double precision, starting at stage `first`.
/// Returns (X, Y, Z) after `n` stages.
pub fn float_cordic(mode: CordicMode, init: (f64, f64, f64), first: i32, n: u32) -> (f64, f64, f64) {
    let kind = match mode.coordinate {
        Coordinate::Hyperbolic => AngleKind::Hyperbolic,
        Coordinate::Linear => AngleKind::Linear,
    };
    let sgn = |v: f64| if v < 0.0 { -1.0 } else { 1.0 };
    let (mut x, mut y, mut z) = init;
    for i in first..first + n as i32 {
        let d = match mode.direction {
            Direction::Rotation => sgn(z),
            Direction::Vectoring => -sgn(x) * sgn(y),
        };
        let p = (-(i as f64)).exp2();
        let nx = x - mode.m() as f64 * d * y * p;
        y += d * x * p;
        z -= d * kind.real(i);
        x = nx;
    }
    (x, y, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StagePlan {
    pub hyperbolic_stages: u32,
    pub linear_stages: u32,
    pub precision: u32,
}

impl StagePlan {
    pub fn new(hyperbolic: u32, linear: u32, precision: u32) -> Result<Self, CordicError> {
        let ok = |s: u32| (1..=precision).contains(&s);
        if !ok(hyperbolic) || !ok(linear) {
            return Err(CordicError::Plan {
                hyperbolic,
                linear,
                precision,
            });
        }
        Ok(Self {
            hyperbolic_stages: hyperbolic,
            linear_stages: linear,
            precision,
        })
    }
}

pub fn default_stage_plan(precision: u32) -> Result<StagePlan, CordicError> {
    let (h, l) = match precision {
        4 => (4, 4),
        8 | 16 => (4, 5),
        32 => (8, 10),
        p => return Err(CordicError::UnsupportedPrecision(p)),
    };
    StagePlan::new(h, l, precision)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn af(bits: u32) -> QFormat {
        QFormat::af_datapath(bits).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn constants() {
        assert!((INV_KH * KH - 1.0).abs() < 1e-3);
        // the quoted HR range includes the classical repeats of stages 4 and 13
        let sum: f64 = (1..60).map(|i| AngleKind::Hyperbolic.real(i)).sum();
        let repeats = AngleKind::Hyperbolic.real(4) + AngleKind::Hyperbolic.real(13);
        assert!((sum + repeats - HR_RANGE).abs() < 1e-4);
        assert!((sum - 1.0555).abs() < 1e-4);
        let lr: f64 = (-2..=5).map(|i| AngleKind::Linear.real(i)).sum();
        assert!((lr - LR_RANGE).abs() < 1e-3);
    }

    #[test]
    fn hr_step_example() {
        let f = af(16);
        let s = CordicState::new(
            quantize(1.2075, f),
            quantize(0.6037, f),
            quantize(-0.0493, f),
            2,
        )
        .unwrap();
        let table = AngleTable::hyperbolic(9, f);
        let (n, d) = cordic_step_traced(&s, CordicMode::HR, &table).unwrap();
        assert_eq!(d, -1);
        let tol = 2.0 * f.lsb();
        assert!(close(n.x.to_f64(), 1.0566, tol), "{}", n.x);
        assert!(close(n.y.to_f64(), 0.3019, tol), "{}", n.y);
        assert!(close(n.z.to_f64(), 0.2061, tol), "{}", n.z);
        assert_eq!(n.stage_index, 3);
    }

    #[test]
    fn lv_step_example() {
        let f = af(16);
        let s = CordicState::new(quantize(2.51, f), quantize(-0.734, f), quantize(0.5, f), 2)
            .unwrap();
        let table = AngleTable::linear(1, 9, f);
        let (n, d) = cordic_step_traced(&s, CordicMode::LV, &table).unwrap();
        assert_eq!(d, 1);
        assert!(close(n.y.to_f64(), -0.1065, 2.0 * f.lsb()));
        assert_eq!(n.z.to_f64(), 0.25);
        assert_eq!(n.x, s.x);
    }

    #[test]
    fn linear_rotation_keeps_x() {
        let f = af(16);
        let s = CordicState::new(quantize(0.7, f), Fxp::zero(f), Fxp::zero(f), 1).unwrap();
        let n = cordic_step(&s, CordicMode::LR, &AngleTable::linear(1, 4, f)).unwrap();
        assert_eq!(n.x, s.x);
    }

    #[test]
    fn step_outside_table() {
        let f = af(16);
        let s = CordicState::new(Fxp::zero(f), Fxp::zero(f), Fxp::zero(f), 5).unwrap();
        let err = cordic_step(&s, CordicMode::HR, &AngleTable::hyperbolic(4, f)).unwrap_err();
        assert_eq!(err, CordicError::Stage { index: 5 });
    }

    #[test]
    fn hyperbolic_vectoring_rejected() {
        assert_eq!(
            CordicMode::new(Coordinate::Hyperbolic, Direction::Vectoring),
            Err(CordicError::Mode)
        );
        assert_eq!(
            CordicMode::new(Coordinate::Linear, Direction::Rotation).unwrap(),
            CordicMode::LR
        );
    }

    #[test]
    fn hr_table_outputs() {
        let f = af(16);
        let tol = 2.0 * f.lsb();
        let (c, s) = hr_sinh_cosh(quantize(0.5, f), 9).unwrap();
        assert!(close(c.to_f64(), 1.1297, tol) && close(s.to_f64(), 0.5218, tol));
        let (c, s) = hr_sinh_cosh(quantize(0.5, f), 4).unwrap();
        assert!(close(c.to_f64(), 1.1214, tol) && close(s.to_f64(), 0.5023, tol));
        let e = c.to_f64() + s.to_f64();
        assert!(close(e, 1.6237, tol));
    }

    #[test]
    fn hr_matches_float_model() {
        let f = af(32);
        for n in [1u32, 4, 9, 16, 29] {
            for z in [0.0, 0.02, -0.02, 0.5, -0.5, 1.0, 1.1182, -1.1182] {
                let (c, s) = hr_sinh_cosh(quantize(z, f), n).unwrap();
                let (x, y, _) = float_cordic(CordicMode::HR, (INV_KH, 0.0, quantize(z, f).to_f64()), 1, n);
                let tol = 2.0 * n as f64 * f.lsb();
                assert!(close(c.to_f64(), x, tol), "n={n} z={z}: {c} vs {x}");
                assert!(close(s.to_f64(), y, tol), "n={n} z={z}: {s} vs {y}");
            }
        }
    }

    #[test]
    fn hr_zero_dead_band() {
        // E1 exceeds the sum of all later angles, so z = 0 (d = +1) cannot
        // rotate back and settles near +0.0431 however many stages run.
        let f = af(32);
        let (c, s) = hr_sinh_cosh(Fxp::zero(f), 29).unwrap();
        let gap = AngleKind::Hyperbolic.real(1)
            - (2..60).map(|i| AngleKind::Hyperbolic.real(i)).sum::<f64>();
        // without repeats the gain is about 0.8298, not Kh
        let gain = INV_KH * (1..60).map(|i| (1.0 - 4f64.powi(-i)).sqrt()).product::<f64>();
        assert!(close(gain, 1.0019, 1e-4));
        assert!(close(s.to_f64(), gain * gap.sinh(), 1e-6), "{s}");
        assert!(close(c.to_f64(), gain * gap.cosh(), 1e-6), "{c}");
    }

    #[test]
    fn hr_odd_even_pairs() {
        let f = af(32);
        let (cp, sp) = hr_sinh_cosh(quantize(0.5, f), 9).unwrap();
        let (cn, sn) = hr_sinh_cosh(quantize(-0.5, f), 9).unwrap();
        assert_eq!(cp, cn);
        assert_eq!(sp, -sn);
        assert!(close(cn.to_f64(), 1.1276, 2e-3) && close(sn.to_f64(), -0.5211, 2e-3));
    }

    #[test]
    fn hr_range_enforced() {
        let f = af(16);
        assert!(matches!(
            hr_sinh_cosh(quantize(1.2, f), 4),
            Err(CordicError::Range { .. })
        ));
        // the rail itself, however it quantizes, is accepted
        for bits in [4, 8, 16, 32] {
            assert!(hr_sinh_cosh(quantize(HR_RANGE, af(bits)), 4).is_ok());
        }
    }

    #[test]
    fn lv_examples() {
        let f = af(16);
        let q = lv_divide(quantize(0.521, f), quantize(2.51, f), 9).unwrap();
        assert!(close(q.to_f64(), 0.208984, 2.0 * f.lsb()));
        let q = lv_divide(Fxp::zero(f), quantize(2.51, f), 9).unwrap();
        assert!(q.to_f64().abs() <= 9.0 * f.lsb() + 2f64.powi(-9));
        let one = quantize(1.0, f);
        let q = lv_divide(one, one, 9).unwrap();
        assert!(close(q.to_f64(), 1.0 - 2f64.powi(-9), 2.0 * f.lsb()));
    }

    #[test]
    fn lv_range_enforced() {
        let f = af(16);
        let err = lv_divide(quantize(1.5, f), quantize(1.0, f), 8).unwrap_err();
        assert!(matches!(err, CordicError::Range { what: "quotient", .. }));
        let err = lv_divide(quantize(0.5, f), quantize(-1.0, f), 8).unwrap_err();
        assert!(matches!(err, CordicError::Range { what: "denominator", .. }));
    }

    #[test]
    fn lr_examples() {
        for bits in [8u32, 16, 32] {
            let f = QFormat::mac_datapath(bits).unwrap();
            let n = bits - 1;
            let tol_stage = n as f64 * f.lsb();
            let acc = quantize(1.25, f);
            let r = lr_mac(quantize(3.0, f), Fxp::zero(f), acc, n).unwrap();
            // z = 0 walks +-2^-i down to the last stage, leaving one stage of residue
            assert!(close(r.to_f64(), 1.25, 3.0 * 2f64.powi(-(n as i32 - 3)) + tol_stage));
            let r = lr_mac(quantize(2.0, f), quantize(0.25, f), quantize(1.0, f), n).unwrap();
            assert!(close(r.to_f64(), 1.5, 2.0 * 2f64.powi(-(n as i32 - 3)) + tol_stage));
            let r = lr_mac(quantize(1.0, f), quantize(1.0, f), Fxp::zero(f), n).unwrap();
            assert!(close(r.to_f64(), 1.0, 2f64.powi(-(n as i32 - 3)) + tol_stage));
        }
    }

    #[test]
    fn lr_example_at_default_stages() {
        let f = QFormat::mac_datapath(16).unwrap();
        let r = lr_mac(quantize(2.0, f), quantize(0.25, f), quantize(1.0, f), 5).unwrap();
        assert!(close(r.to_f64(), 1.5, 2.0 * 0.25 + 5.0 * f.lsb()));
    }

    #[test]
    fn lr_range_and_formats() {
        let f = QFormat::mac_datapath(16).unwrap();
        assert!(lr_mac(Fxp::zero(f), quantize(7.99, f), Fxp::zero(f), 8).is_err());
        assert!(lr_mac(Fxp::zero(f), quantize(LR_RANGE, f), Fxp::zero(f), 8).is_ok());
        let g = af(16);
        assert!(matches!(
            lr_mac(Fxp::zero(f), Fxp::zero(g), Fxp::zero(f), 8),
            Err(CordicError::FormatMismatch(..))
        ));
    }

    #[test]
    fn default_plans() {
        let p = default_stage_plan(8).unwrap();
        assert_eq!((p.hyperbolic_stages, p.linear_stages), (4, 5));
        let p = default_stage_plan(32).unwrap();
        assert_eq!((p.hyperbolic_stages, p.linear_stages), (8, 10));
        let p = default_stage_plan(4).unwrap();
        assert_eq!((p.hyperbolic_stages, p.linear_stages), (4, 4));
        assert_eq!(default_stage_plan(12), Err(CordicError::UnsupportedPrecision(12)));
        assert!(StagePlan::new(9, 4, 8).is_err());
        assert!(StagePlan::new(0, 4, 8).is_err());
    }

    #[test]
    fn angle_tables() {
        let f = af(16);
        let t = AngleTable::hyperbolic(16, f);
        assert_eq!(t.entry(1).unwrap(), quantize(0.5493061443, f));
        assert!(t.entry(0).is_none() && t.entry(17).is_none());
        for w in t.entries().windows(2) {
            assert!(w[0].raw() >= w[1].raw());
        }
        let m = AngleTable::linear(LR_FIRST_STAGE, 5, QFormat::mac_datapath(8).unwrap());
        assert_eq!(m.entry(-2).unwrap().to_f64(), 4.0);
        assert_eq!(m.entry(2).unwrap().to_f64(), 0.25);
        assert!(AngleTable::new(AngleKind::Hyperbolic, 0, 3, f).is_err());
    }

    #[test]
    fn angle_csv_layout() {
        let csv = angle_table_csv(AngleKind::Hyperbolic, 1, 3, &[af(8), af(16)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "stage,e_real,raw_q8_5,raw_q16_13");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,0.549306144334"));
        assert!(lines[1].ends_with(",18,4500"));
    }
}
