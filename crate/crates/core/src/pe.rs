//! The configurable processing element: activation functions and MAC over
//! packed SIMD lanes, the softmax exponential FIFO, and the iterative and
//! pipelined timing models.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cordic::{
    default_stage_plan, hr_sinh_cosh, lr_mac, lv_divide, CordicError, StagePlan, HR_RANGE,
};
use crate::fixedpoint::{
    barrel_shift_right, pack_lanes, quantize, sat_add_sub, unpack_lanes, AddSub, FixedError, Fxp,
    LaneConfig, QFormat, SimdWord,
};

pub const FIFO_CAPACITY: usize = 64;
/// log2(FIFO_CAPACITY): the running sum never overflows a full FIFO of
/// in-range exponentials.
pub const FIFO_SUM_GUARD_BITS: u32 = 6;
/// Cycles to load one issue's operands.
pub const LOAD_CYCLES: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("softmax FIFO overflow: {len} inputs exceed capacity {capacity}")]
    FifoOverflow { len: usize, capacity: usize },
    #[error("word layout {got:?} does not match precision {precision} ({expected:?})")]
    Layout {
        precision: Precision,
        expected: LaneConfig,
        got: LaneConfig,
    },
    #[error(transparent)]
    Cordic(#[from] CordicError),
    #[error(transparent)]
    Fixed(#[from] FixedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    FxP4,
    FxP8,
    FxP16,
    FxP32,
    /// Two 12-bit lanes plus two 4-bit lanes.
    H12,
    /// One 24-bit lane plus two 4-bit lanes.
    H24,
}

impl Precision {
    pub const UNIFORM: [Precision; 4] = [
        Precision::FxP4,
        Precision::FxP8,
        Precision::FxP16,
        Precision::FxP32,
    ];

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            4 => Some(Precision::FxP4),
            8 => Some(Precision::FxP8),
            16 => Some(Precision::FxP16),
            32 => Some(Precision::FxP32),
            12 => Some(Precision::H12),
            24 => Some(Precision::H24),
            _ => None,
        }
    }

    /// Widest lane width.
    pub fn bits(self) -> u32 {
        match self {
            Precision::FxP4 => 4,
            Precision::FxP8 => 8,
            Precision::FxP16 => 16,
            Precision::FxP32 => 32,
            Precision::H12 => 12,
            Precision::H24 => 24,
        }
    }

    pub fn lane_config(self) -> LaneConfig {
        match self {
            Precision::FxP4 => LaneConfig::L16x4,
            Precision::FxP8 => LaneConfig::L4x8,
            Precision::FxP16 => LaneConfig::L2x16,
            Precision::FxP32 => LaneConfig::L1x32,
            Precision::H12 => LaneConfig::H2x12_2x4,
            Precision::H24 => LaneConfig::H1x24_2x4,
        }
    }

    /// Packed words per issue: sub-word modes fill one word per load cycle,
    /// FxP32 carries a single operand.
    pub fn words_per_issue(self) -> u64 {
        match self {
            Precision::FxP32 => 1,
            _ => 2,
        }
    }

    /// Results per issue: 16 / 8 / 4 / 1 for FxP4 / 8 / 16 / 32.
    pub fn results_per_issue(self) -> u64 {
        self.words_per_issue() * self.lane_config().lanes() as u64
    }

    pub fn af_format(self) -> QFormat {
        QFormat::af_datapath(self.bits()).expect("standard widths are valid")
    }

    pub fn mac_format(self) -> QFormat {
        QFormat::mac_datapath(self.bits()).expect("standard widths are valid")
    }

    /// AF formats per lane of this precision's layout.
    pub fn lane_af_formats(self) -> Vec<QFormat> {
        lane_formats(self.lane_config(), QFormat::af_datapath)
    }

    pub fn lane_mac_formats(self) -> Vec<QFormat> {
        lane_formats(self.lane_config(), QFormat::mac_datapath)
    }

    pub fn default_plan(self) -> StagePlan {
        match self {
            Precision::H12 => StagePlan::new(4, 5, 12).expect("valid"),
            Precision::H24 => StagePlan::new(8, 10, 24).expect("valid"),
            p => default_stage_plan(p.bits()).expect("uniform precision"),
        }
    }
}

fn lane_formats(cfg: LaneConfig, f: fn(u32) -> Result<QFormat, FixedError>) -> Vec<QFormat> {
    cfg.lane_widths()
        .iter()
        .map(|&w| f(w).expect("lane widths are valid"))
        .collect()
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Precision::FxP4 => "FxP4",
            Precision::FxP8 => "FxP8",
            Precision::FxP16 => "FxP16",
            Precision::FxP32 => "FxP32",
            Precision::H12 => "H12",
            Precision::H24 => "H24",
        };
        f.write_str(s)
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        let t = t.strip_prefix("fxp").unwrap_or(&t);
        t.parse::<u32>()
            .ok()
            .and_then(Precision::from_bits)
            .or(match t {
                "h12" => Some(Precision::H12),
                "h24" => Some(Precision::H24),
                _ => None,
            })
            .ok_or_else(|| format!("unknown precision '{s}' (expected 4, 8, 16, 32, h12 or h24)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AfSelect {
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    Exp,
}

impl AfSelect {
    pub const ALL: [AfSelect; 5] = [
        AfSelect::Sigmoid,
        AfSelect::Tanh,
        AfSelect::Relu,
        AfSelect::Softmax,
        AfSelect::Exp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AfSelect::Sigmoid => "sigmoid",
            AfSelect::Tanh => "tanh",
            AfSelect::Relu => "relu",
            AfSelect::Softmax => "softmax",
            AfSelect::Exp => "exp",
        }
    }
}

impl FromStr for AfSelect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AfSelect::ALL
            .into_iter()
            .find(|a| a.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown activation '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtrlOp {
    Af,
    Mac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Iterative,
    Pipelined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PeConfig {
    pub precision: Precision,
    pub af: AfSelect,
    pub op: CtrlOp,
    pub exec: ExecMode,
    pub plan: StagePlan,
    /// Run two sub-word operations through the folded stages of FxP32
    /// pipelined hardware.
    pub fold: bool,
}

impl PeConfig {
    pub fn new(
        precision: Precision,
        af: AfSelect,
        op: CtrlOp,
        exec: ExecMode,
        plan: StagePlan,
        fold: bool,
    ) -> Result<Self, PeError> {
        let cfg = Self {
            precision,
            af,
            op,
            exec,
            plan,
            fold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pipelined AF with the precision's default plan, no folding.
    pub fn af(precision: Precision, af: AfSelect) -> Result<Self, PeError> {
        Self::new(
            precision,
            af,
            CtrlOp::Af,
            ExecMode::Pipelined,
            precision.default_plan(),
            false,
        )
    }

    pub fn mac(precision: Precision) -> Result<Self, PeError> {
        Self::new(
            precision,
            AfSelect::Relu,
            CtrlOp::Mac,
            ExecMode::Pipelined,
            precision.default_plan(),
            false,
        )
    }

    pub fn validate(&self) -> Result<(), PeError> {
        if self.op == CtrlOp::Af && self.af == AfSelect::Softmax {
            if self.exec != ExecMode::Pipelined {
                return Err(PeError::Config(
                    "softmax requires pipelined execution".into(),
                ));
            }
            if !matches!(
                self.precision,
                Precision::FxP8 | Precision::FxP16 | Precision::FxP32
            ) {
                return Err(PeError::Config(format!(
                    "softmax requires FxP8, FxP16 or FxP32 (got {})",
                    self.precision
                )));
            }
        }
        if self.fold {
            if self.exec != ExecMode::Pipelined
                || !matches!(self.precision, Precision::FxP8 | Precision::FxP16)
            {
                return Err(PeError::Config(
                    "stage folding needs pipelined FxP8 or FxP16".into(),
                ));
            }
            let full = Precision::FxP32.default_plan();
            if 2 * self.plan.hyperbolic_stages > full.hyperbolic_stages
                || 2 * self.plan.linear_stages > full.linear_stages
            {
                return Err(PeError::Config(format!(
                    "stage folding needs at most half of the FxP32 stages ({}, {})",
                    full.hyperbolic_stages / 2,
                    full.linear_stages / 2
                )));
            }
        }
        Ok(())
    }

    /// Stages one operation occupies in the CORDIC engine.
    pub fn op_stages(&self) -> u32 {
        match (self.op, self.af) {
            (CtrlOp::Mac, _) => self.plan.linear_stages,
            (CtrlOp::Af, AfSelect::Relu) => 1,
            (CtrlOp::Af, AfSelect::Exp) => self.plan.hyperbolic_stages,
            (CtrlOp::Af, _) => self.plan.hyperbolic_stages + self.plan.linear_stages,
        }
    }

    pub fn fold_factor(&self) -> u64 {
        if self.fold {
            2
        } else {
            1
        }
    }
}

/// Saturates z to the HR convergence rail.
pub fn clamp_to_hr(z: Fxp) -> Fxp {
    let rail = quantize(HR_RANGE, z.format()).raw();
    Fxp::saturating_from_raw(z.raw().clamp(-rail, rail) as i128, z.format())
}

/// cosh + sinh in z's format.
pub fn af_exp(z: Fxp, plan: &StagePlan) -> Result<Fxp, PeError> {
    let (c, s) = hr_sinh_cosh(clamp_to_hr(z), plan.hyperbolic_stages)?;
    Ok(sat_add_sub(c, s, AddSub::Add)?)
}

/// Source of the divider's denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Denominator {
    /// 1 + e^z (sigmoid).
    One,
    /// The FIFO's accumulated sum (softmax).
    FifoSum(Fxp),
}

/// e / (1 + e) for sigmoid, e / sum for softmax. For the constant-one source
/// both operands are halved first so 1 + e stays inside the format.
pub fn divide_exp(e: Fxp, den: Denominator, plan: &StagePlan) -> Result<Fxp, PeError> {
    match den {
        Denominator::One => {
            let f = e.format();
            let half = barrel_shift_right(e, 1);
            let d = sat_add_sub(half, quantize(0.5, f), AddSub::Add)?;
            Ok(lv_divide(half, d, plan.linear_stages)?)
        }
        Denominator::FifoSum(sum) => {
            let e = e.convert(sum.format());
            Ok(lv_divide(e, sum, plan.linear_stages)?)
        }
    }
}

pub fn af_sigmoid(z: Fxp, plan: &StagePlan) -> Result<Fxp, PeError> {
    divide_exp(af_exp(z, plan)?, Denominator::One, plan)
}

pub fn af_tanh(z: Fxp, plan: &StagePlan) -> Result<Fxp, PeError> {
    let (c, s) = hr_sinh_cosh(clamp_to_hr(z), plan.hyperbolic_stages)?;
    // the divider needs |num| <= den
    let s = Fxp::saturating_from_raw(s.raw().clamp(-c.raw(), c.raw()) as i128, s.format());
    Ok(lv_divide(s, c, plan.linear_stages)?)
}

pub fn relu(v: Fxp) -> Fxp {
    if v.is_negative() {
        Fxp::zero(v.format())
    } else {
        v
    }
}

/// Lane-wise ReLU: a lane whose sign bit is set is muxed to zero.
pub fn af_relu(w: &SimdWord) -> SimdWord {
    let cfg = w.lanes();
    let mut clear = 0u32;
    for (&width, off) in cfg.lane_widths().iter().zip(cfg.lane_offsets()) {
        if (w.raw() >> (off + width - 1)) & 1 == 1 {
            clear |= (((1u64 << width) - 1) << off) as u32;
        }
    }
    SimdWord::from_raw(w.raw() & !clear, cfg, w.formats()).expect("layout unchanged")
}

/// Streams exponentials in arrival order and keeps their running sum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoftmaxFifo {
    entries: VecDeque<Fxp>,
    sum: Fxp,
    capacity: usize,
}

impl SoftmaxFifo {
    pub fn new(capacity: usize, entry_format: QFormat) -> Result<Self, PeError> {
        let guard = usize::BITS - capacity.max(1).next_power_of_two().leading_zeros() - 1;
        let wide = entry_format.widened(guard.max(FIFO_SUM_GUARD_BITS))?;
        Ok(Self {
            entries: VecDeque::with_capacity(capacity),
            sum: Fxp::zero(wide),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn running_sum(&self) -> Fxp {
        self.sum
    }

    pub fn push(&mut self, e: Fxp) -> Result<(), PeError> {
        if self.entries.len() == self.capacity {
            return Err(PeError::FifoOverflow {
                len: self.entries.len() + 1,
                capacity: self.capacity,
            });
        }
        let e = if e.is_negative() {
            Fxp::zero(self.sum.format())
        } else {
            e.convert(self.sum.format())
        };
        self.sum = sat_add_sub(self.sum, e, AddSub::Add)?;
        self.entries.push_back(e);
        Ok(())
    }

    pub fn pop(&mut self) -> Option<Fxp> {
        let e = self.entries.pop_front()?;
        self.sum = sat_add_sub(self.sum, e, AddSub::Sub).expect("same format");
        Some(e)
    }
}

/// Max-subtract, exponentiate into the FIFO, then divide each entry by the
/// accumulated sum. Outputs are in the input format.
pub fn softmax_run(xs: &[Fxp], plan: &StagePlan) -> Result<Vec<Fxp>, PeError> {
    softmax_with_capacity(xs, plan, FIFO_CAPACITY)
}

pub fn softmax_with_capacity(
    xs: &[Fxp],
    plan: &StagePlan,
    capacity: usize,
) -> Result<Vec<Fxp>, PeError> {
    let Some(first) = xs.first() else {
        return Ok(Vec::new());
    };
    let f = first.format();
    if let Some(bad) = xs.iter().find(|x| x.format() != f) {
        return Err(FixedError::FormatMismatch(f, bad.format()).into());
    }
    if xs.len() > capacity {
        return Err(PeError::FifoOverflow {
            len: xs.len(),
            capacity,
        });
    }
    let max = xs.iter().copied().max_by_key(|x| x.raw()).expect("non-empty");
    let mut fifo = SoftmaxFifo::new(capacity, f)?;
    for &x in xs {
        let shifted = sat_add_sub(x, max, AddSub::Sub)?;
        fifo.push(af_exp(shifted, plan)?)?;
    }
    let sum = fifo.running_sum();
    let mut out = Vec::with_capacity(xs.len());
    while let Some(e) = fifo.pop() {
        out.push(divide_exp(e, Denominator::FifoSum(sum), plan)?.convert(f));
    }
    Ok(out)
}

/// Scalar AF dispatch (softmax is a vector op; see [`softmax_run`]).
pub fn af_scalar(af: AfSelect, z: Fxp, plan: &StagePlan) -> Result<Fxp, PeError> {
    match af {
        AfSelect::Sigmoid => af_sigmoid(z, plan),
        AfSelect::Tanh => af_tanh(z, plan),
        AfSelect::Relu => Ok(relu(z)),
        AfSelect::Exp => af_exp(z, plan),
        AfSelect::Softmax => Err(PeError::Config(
            "softmax is a vector operation".into(),
        )),
    }
}

fn check_layout(w: &SimdWord, cfg: &PeConfig) -> Result<(), PeError> {
    let expected = cfg.precision.lane_config();
    if w.lanes() != expected {
        return Err(PeError::Layout {
            precision: cfg.precision,
            expected,
            got: w.lanes(),
        });
    }
    Ok(())
}

/// AF on every lane of one word. Softmax normalizes across the word's lanes.
pub fn pe_execute(w: &SimdWord, cfg: &PeConfig) -> Result<SimdWord, PeError> {
    cfg.validate()?;
    check_layout(w, cfg)?;
    if cfg.op == CtrlOp::Mac {
        return Err(PeError::Config(
            "MAC needs multiplier and accumulator words; use pe_execute_mac".into(),
        ));
    }
    let out = match cfg.af {
        AfSelect::Relu => return Ok(af_relu(w)),
        AfSelect::Softmax => softmax_run(&unpack_lanes(w), &cfg.plan)?,
        af => unpack_lanes(w)
            .into_iter()
            .map(|v| af_scalar(af, v, &cfg.plan))
            .collect::<Result<Vec<_>, _>>()?,
    };
    Ok(pack_lanes(&out, w.lanes())?)
}

/// Per-lane acc + a * z through the LR engine.
pub fn pe_execute_mac(
    a: &SimdWord,
    z: &SimdWord,
    acc: &SimdWord,
    cfg: &PeConfig,
) -> Result<SimdWord, PeError> {
    cfg.validate()?;
    for w in [a, z, acc] {
        check_layout(w, cfg)?;
    }
    let out = unpack_lanes(a)
        .into_iter()
        .zip(unpack_lanes(z))
        .zip(unpack_lanes(acc))
        .map(|((a, z), acc)| lr_mac(a, z, acc, cfg.plan.linear_stages))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(pack_lanes(&out, a.lanes())?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PipelineTiming {
    pub cycles_elapsed: u64,
    /// Issues in each pipeline slot when the count was taken.
    pub in_flight: Vec<u64>,
    pub results_ready: u64,
    pub fill_cycles: u64,
    pub results_per_issue: u64,
    pub fold: u64,
}

impl PipelineTiming {
    pub fn results_per_cycle(&self) -> f64 {
        if self.cycles_elapsed == 0 {
            0.0
        } else {
            self.results_ready as f64 / self.cycles_elapsed as f64
        }
    }
}

/// Pipeline depth after operand load: CORDIC stages plus the exp adder and
/// the output mux.
pub fn fill_cycles(cfg: &PeConfig) -> u64 {
    cfg.op_stages() as u64 + 2
}

/// Closed-form cycle count for `n_issues` issues.
///
/// Pipelined: one issue (two with folding) enters every two cycles and the
/// last leaves `fill` cycles after its load completes, so
/// `2 * ceil(n / fold) + fill`; with no issues only the fill is charged.
/// Iterative: each issue occupies the engine for every stage, no overlap.
pub fn pipeline_timing(cfg: &PeConfig, n_issues: u64) -> PipelineTiming {
    let fill = fill_cycles(cfg);
    let rpi = cfg.precision.results_per_issue();
    let cycles = match cfg.exec {
        ExecMode::Pipelined => LOAD_CYCLES * n_issues.div_ceil(cfg.fold_factor()) + fill,
        ExecMode::Iterative => n_issues * cfg.op_stages() as u64,
    };
    PipelineTiming {
        cycles_elapsed: cycles,
        in_flight: vec![0; fill as usize],
        results_ready: n_issues * rpi,
        fill_cycles: fill,
        results_per_issue: rpi,
        fold: cfg.fold_factor(),
    }
}

/// Cycle-stepped pipelined model, used to cross-check [`pipeline_timing`].
#[derive(Debug, Clone)]
pub struct PipelineSim {
    slots: Vec<u64>,
    pending: u64,
    loading: u64,
    load_progress: u64,
    fold: u64,
    results_per_issue: u64,
    cycle: u64,
    retired: u64,
}

impl PipelineSim {
    pub fn new(cfg: &PeConfig, n_issues: u64) -> Self {
        Self {
            slots: vec![0; fill_cycles(cfg) as usize],
            pending: n_issues,
            loading: 0,
            load_progress: 0,
            fold: cfg.fold_factor(),
            results_per_issue: cfg.precision.results_per_issue(),
            cycle: 0,
            retired: 0,
        }
    }

    pub fn in_flight(&self) -> &[u64] {
        &self.slots
    }

    pub fn is_done(&self) -> bool {
        self.pending == 0 && self.loading == 0 && self.slots.iter().all(|&s| s == 0)
    }

    pub fn step(&mut self) {
        self.cycle += 1;
        // advance every slot; the last one retires
        self.retired += self.slots.pop().unwrap_or(0);
        self.slots.insert(0, 0);
        if self.loading == 0 && self.pending > 0 {
            self.loading = self.pending.min(self.fold);
            self.pending -= self.loading;
            self.load_progress = 0;
        }
        if self.loading > 0 {
            self.load_progress += 1;
            if self.load_progress == LOAD_CYCLES {
                self.slots[0] = self.loading;
                self.loading = 0;
            }
        }
    }

    /// Steps until drained. An empty run still flushes the pipeline once.
    pub fn run(mut self) -> PipelineTiming {
        let depth = self.slots.len() as u64;
        if self.is_done() {
            for _ in 0..depth {
                self.step();
            }
        }
        while !self.is_done() {
            self.step();
        }
        PipelineTiming {
            cycles_elapsed: self.cycle,
            in_flight: self.slots.clone(),
            results_ready: self.retired * self.results_per_issue,
            fill_cycles: depth,
            results_per_issue: self.results_per_issue,
            fold: self.fold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub input: f64,
    pub output: f64,
    pub raw: i64,
}

/// AF evaluated at `points` inputs `from + k * (to - from) / points`, each
/// quantized to the precision's AF format. Softmax is evaluated as the
/// first output of softmax([x, 0]).
pub fn af_curve(
    af: AfSelect,
    precision: Precision,
    plan: &StagePlan,
    from: f64,
    to: f64,
    points: usize,
) -> Result<Vec<CurvePoint>, PeError> {
    let cfg = PeConfig::new(precision, af, CtrlOp::Af, ExecMode::Pipelined, *plan, false)?;
    let f = precision.af_format();
    (0..points)
        .map(|k| {
            let x = quantize(from + k as f64 * (to - from) / points as f64, f);
            let y = match cfg.af {
                AfSelect::Softmax => softmax_run(&[x, Fxp::zero(f)], plan)?[0],
                af => af_scalar(af, x, plan)?,
            };
            Ok(CurvePoint {
                input: x.to_f64(),
                output: y.to_f64(),
                raw: y.raw(),
            })
        })
        .collect()
}
