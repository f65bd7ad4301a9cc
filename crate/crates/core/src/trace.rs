//! Golden iteration traces and the row-by-row comparison against the
//! fixed-point engine.

use serde::Serialize;

use crate::cordic::{hr_init, run_traced, CordicError, CordicMode, CordicState};
use crate::fixedpoint::{quantize, Fxp, QFormat};

/// Deltas are measured in LSBs of Q(16,13), the AF format at FxP16, at every
/// precision. The golden values are printed to four to six decimals, so a
/// finer unit would only measure print rounding.
pub const TRACE_LSB_FRAC_BITS: u32 = 13;
pub const TRACE_TOLERANCE_LSB: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceTable {
    /// HR mode, z = 0.5, nine stages.
    Hyp,
    /// LV mode, 0.521 / 2.51, nine stages.
    Div,
}

impl TraceTable {
    pub fn golden(self) -> &'static [GoldenRow] {
        match self {
            TraceTable::Hyp => &HYP_GOLDEN,
            TraceTable::Div => &DIV_GOLDEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GoldenRow {
    pub stage: i32,
    /// E_i as printed.
    pub e: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub d: i8,
    /// Added to the printed z before comparing. Nonzero only where the
    /// printed value inherits a misprinted angle.
    pub z_correction: f64,
}

const fn row(stage: i32, e: f64, x: f64, y: f64, z: f64, d: i8) -> GoldenRow {
    GoldenRow {
        stage,
        e,
        x,
        y,
        z,
        d,
        z_correction: 0.0,
    }
}

/// atanh(2^-7) = 0.0078127 is printed as 0.0068; z from stage 7 on carries
/// the difference.
pub const HYP_E7_ERRATUM: f64 = 0.0068 - 0.007812658951540421;

const fn fixed(mut r: GoldenRow) -> GoldenRow {
    r.z_correction = HYP_E7_ERRATUM;
    r
}

pub const HYP_GOLDEN: [GoldenRow; 9] = [
    row(1, 0.5493, 1.2075, 0.6037, -0.0493, 1),
    row(2, 0.2554, 1.0566, 0.3019, 0.2061, -1),
    row(3, 0.1257, 1.0943, 0.4339, 0.0804, 1),
    row(4, 0.0626, 1.1214, 0.5023, 0.0179, 1),
    row(5, 0.0313, 1.1371, 0.5374, -0.0134, 1),
    row(6, 0.0156, 1.1287, 0.5196, 0.0022, -1),
    fixed(row(7, 0.0068, 1.1328, 0.5284, -0.0046, 1)),
    fixed(row(8, 0.0039, 1.1307, 0.5240, -0.0007, -1)),
    fixed(row(9, 0.0020, 1.1297, 0.5218, 0.0013, -1)),
];

pub const DIV_X: f64 = 2.51;
/// Back-solved from the first row: Y1 = Y0 - 2.51 / 2 = -0.734.
pub const DIV_Y0: f64 = 0.521;

pub const DIV_GOLDEN: [GoldenRow; 9] = [
    row(1, 0.5, DIV_X, -0.734, 0.5, -1),
    row(2, 0.25, DIV_X, -0.1065, 0.25, 1),
    row(3, 0.125, DIV_X, 0.20725, 0.125, 1),
    row(4, 0.0625, DIV_X, 0.050375, 0.1875, -1),
    row(5, 0.03125, DIV_X, -0.02806, 0.21875, -1),
    row(6, 0.015625, DIV_X, 0.011156, 0.203125, 1),
    row(7, 0.007812, DIV_X, -0.00845, 0.210937, -1),
    row(8, 0.003906, DIV_X, 0.001351, 0.207031, 1),
    row(9, 0.001953, DIV_X, -0.00355, 0.208984, -1),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AxisDelta {
    pub expected: f64,
    pub got: f64,
    pub raw: i64,
    /// (got - expected) in trace LSBs.
    pub delta_lsb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowComparison {
    pub stage: i32,
    pub d_expected: i8,
    pub d: i8,
    pub x: AxisDelta,
    pub y: AxisDelta,
    pub z: AxisDelta,
    pub z_printed: f64,
}

impl RowComparison {
    pub fn worst_lsb(&self) -> f64 {
        [self.x, self.y, self.z]
            .iter()
            .map(|a| a.delta_lsb.abs())
            .fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.d == self.d_expected && self.worst_lsb() <= TRACE_TOLERANCE_LSB
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceComparison {
    pub table: TraceTable,
    pub format: String,
    pub tolerance_lsb: f64,
    pub rows: Vec<RowComparison>,
}

impl TraceComparison {
    pub fn passes(&self) -> bool {
        self.rows.iter().all(RowComparison::passes)
    }

    pub fn worst_lsb(&self) -> f64 {
        self.rows.iter().map(RowComparison::worst_lsb).fold(0.0, f64::max)
    }

    /// Rows needed to reach `stage` inclusive all pass.
    pub fn passes_through(&self, stage: i32) -> bool {
        self.rows
            .iter()
            .filter(|r| r.stage <= stage)
            .all(RowComparison::passes)
    }
}

/// Runs the golden input through the engine in `format` and compares
/// every row.
pub fn compare_trace(table: TraceTable, format: QFormat) -> Result<TraceComparison, CordicError> {
    let golden = table.golden();
    let n = golden.len() as u32;
    let (init, mode) = match table {
        TraceTable::Hyp => (hr_init(quantize(0.5, format))?, CordicMode::HR),
        TraceTable::Div => (
            CordicState::new(
                quantize(DIV_X, format),
                quantize(DIV_Y0, format),
                Fxp::zero(format),
                1,
            )?,
            CordicMode::LV,
        ),
    };
    let (_, rows) = run_traced(&init, mode, n)?;
    let unit = (-(TRACE_LSB_FRAC_BITS as f64)).exp2();
    let axis = |expected: f64, v: Fxp| AxisDelta {
        expected,
        got: v.to_f64(),
        raw: v.raw(),
        delta_lsb: (v.to_f64() - expected) / unit,
    };
    let rows = rows
        .iter()
        .zip(golden)
        .map(|(r, g)| RowComparison {
            stage: r.stage,
            d_expected: g.d,
            d: r.d,
            x: axis(g.x, r.x),
            y: axis(g.y, r.y),
            z: axis(g.z + g.z_correction, r.z),
            z_printed: g.z,
        })
        .collect();
    Ok(TraceComparison {
        table,
        format: format.to_string(),
        tolerance_lsb: TRACE_TOLERANCE_LSB,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cordic::AngleKind;

    fn af(bits: u32) -> QFormat {
        QFormat::af_datapath(bits).unwrap()
    }

    #[test]
    fn erratum_is_the_e7_gap() {
        assert!((AngleKind::Hyperbolic.real(7) - 0.0078127).abs() < 1e-6);
        // every other printed angle agrees to print precision
        for g in HYP_GOLDEN.iter().filter(|g| g.stage != 7) {
            assert!((AngleKind::Hyperbolic.real(g.stage) - g.e).abs() <= 0.6e-4, "{g:?}");
        }
        for g in DIV_GOLDEN {
            assert!((AngleKind::Linear.real(g.stage) - g.e).abs() <= 1e-6);
        }
    }

    #[test]
    fn golden_rows_are_self_consistent() {
        // z recurrence on the printed (corrected) values
        let mut z = 0.5;
        for g in HYP_GOLDEN {
            z -= g.d as f64 * AngleKind::Hyperbolic.real(g.stage);
            assert!((z - (g.z + g.z_correction)).abs() < 1.5e-4, "stage {}", g.stage);
        }
        let mut y = DIV_Y0;
        for g in DIV_GOLDEN {
            y += g.d as f64 * DIV_X * AngleKind::Linear.real(g.stage);
            assert!((y - g.y).abs() < 1e-5, "stage {}", g.stage);
        }
    }

    #[test]
    fn hyp_trace_within_tolerance() {
        for bits in [16, 32] {
            let c = compare_trace(TraceTable::Hyp, af(bits)).unwrap();
            assert!(c.passes(), "FxP{bits}: worst {}", c.worst_lsb());
            assert_eq!(c.rows.len(), 9);
        }
    }

    #[test]
    fn div_trace_directions_and_quotient() {
        for bits in [16, 32] {
            let c = compare_trace(TraceTable::Div, af(bits)).unwrap();
            assert!(c.rows.iter().all(|r| r.d == r.d_expected));
            assert!(c.rows.iter().all(|r| r.z.delta_lsb.abs() <= TRACE_TOLERANCE_LSB));
        }
        assert!(compare_trace(TraceTable::Div, af(32)).unwrap().passes());
    }
}
