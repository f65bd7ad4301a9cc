//! Monte-Carlo error measurement against real-arithmetic references, and
//! stage-count sweeps with knee selection.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cordic::{lr_mac, lv_divide, StagePlan, HR_RANGE, LR_RANGE};
use crate::fixedpoint::{quantize, Fxp};
use crate::pe::{af_exp, af_sigmoid, af_tanh, softmax_run, PeError, Precision};

/// Generator and draw rule, recorded with every report.
pub const PRNG_ID: &str = "chacha8 (rand_chacha 0.9, seed_from_u64); u = (next_u64 >> 11) * 2^-53";
pub const SOFTMAX_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("no reports to select from")]
    Empty,
    #[error("stage {stage} is outside 1..={precision}")]
    StageRange { stage: u32, precision: u32 },
    #[error("unknown function '{0}'")]
    UnknownFunction(String),
    #[error(transparent)]
    Pe(#[from] PeError),
}

impl From<crate::cordic::CordicError> for HarnessError {
    fn from(e: crate::cordic::CordicError) -> Self {
        HarnessError::Pe(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Function {
    Sigmoid,
    Tanh,
    Exp,
    Divide,
    Mac,
    Softmax,
}

impl Function {
    pub const ALL: [Function; 6] = [
        Function::Sigmoid,
        Function::Tanh,
        Function::Exp,
        Function::Divide,
        Function::Mac,
        Function::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Function::Sigmoid => "sigmoid",
            Function::Tanh => "tanh",
            Function::Exp => "exp",
            Function::Divide => "divide",
            Function::Mac => "mac",
            Function::Softmax => "softmax",
        }
    }

    pub fn uses_hyperbolic(self) -> bool {
        !matches!(self, Function::Divide | Function::Mac)
    }

    pub fn uses_linear(self) -> bool {
        self != Function::Exp
    }
}

impl fmt::Display for Function {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Function {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Function::ALL
            .into_iter()
            .find(|f| f.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| HarnessError::UnknownFunction(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub function: Function,
    pub precision: u32,
    pub hyp_stages: u32,
    pub lin_stages: u32,
    pub samples: u64,
    pub mae: f64,
    pub mse: f64,
    pub max_abs_err: f64,
    pub seed: u64,
}

impl ErrorReport {
    pub fn plan(&self) -> StagePlan {
        StagePlan {
            hyperbolic_stages: self.hyp_stages,
            linear_stages: self.lin_stages,
            precision: self.precision,
        }
    }
}

/// 2^((N/2)+1).
pub fn sample_count(bits: u32) -> u64 {
    1u64 << (bits / 2 + 1)
}

struct Uniform(ChaCha8Rng);

impl Uniform {
    fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (-53f64).exp2()
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }
}

/// `n` draws from U[lo, hi) with the harness PRNG.
pub fn uniform_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut u = Uniform::new(seed);
    (0..n).map(|_| u.range(lo, hi)).collect()
}

#[derive(Default)]
struct Accum {
    n: u64,
    sum: f64,
    sum_sq: f64,
    max: f64,
}

impl Accum {
    fn add(&mut self, err: f64) {
        let e = err.abs();
        self.n += 1;
        self.sum += e;
        self.sum_sq += e * e;
        self.max = self.max.max(e);
    }
}

/// One cell with the standard sample count for the precision.
pub fn mc_error(
    function: Function,
    precision: Precision,
    plan: &StagePlan,
    seed: u64,
) -> Result<ErrorReport, HarnessError> {
    mc_error_n(function, precision, plan, seed, sample_count(precision.bits()))
}

pub fn mc_error_n(
    function: Function,
    precision: Precision,
    plan: &StagePlan,
    seed: u64,
    samples: u64,
) -> Result<ErrorReport, HarnessError> {
    let mut rng = Uniform::new(seed);
    let mut acc = Accum::default();
    let af = precision.af_format();
    let mac = precision.mac_format();
    for _ in 0..samples {
        match function {
            Function::Sigmoid | Function::Tanh | Function::Exp => {
                let z = rng.range(-HR_RANGE, HR_RANGE);
                let zq = quantize(z, af);
                let (got, want) = match function {
                    Function::Sigmoid => (af_sigmoid(zq, plan)?, 1.0 / (1.0 + (-z).exp())),
                    Function::Tanh => (af_tanh(zq, plan)?, z.tanh()),
                    _ => (af_exp(zq, plan)?, z.exp()),
                };
                acc.add(got.to_f64() - want);
            }
            Function::Divide => {
                let q = rng.range(-1.0, 1.0);
                let den = 1.0 - rng.unit();
                let dq = quantize(den, af).raw().max(1);
                let nq = quantize(q * den, af).raw().clamp(-dq, dq);
                let got = lv_divide(
                    Fxp::from_raw(nq, af).expect("clamped"),
                    Fxp::from_raw(dq, af).expect("positive"),
                    plan.linear_stages,
                )?;
                acc.add(got.to_f64() - q);
            }
            Function::Mac => {
                let z = rng.range(-LR_RANGE, LR_RANGE);
                let a = rng.range(-0.5, 0.5);
                let c = rng.range(-3.5, 3.5);
                let got = lr_mac(
                    quantize(a, mac),
                    quantize(z, mac),
                    quantize(c, mac),
                    plan.linear_stages,
                )?;
                acc.add(got.to_f64() - (c + a * z));
            }
            Function::Softmax => {
                let half = HR_RANGE / 2.0;
                let xs: Vec<f64> = (0..SOFTMAX_LEN).map(|_| rng.range(-half, half)).collect();
                let xq: Vec<Fxp> = xs.iter().map(|&x| quantize(x, af)).collect();
                let got = softmax_checked(&xq, precision, plan)?;
                let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = ex.iter().sum();
                for (g, e) in got.iter().zip(&ex) {
                    acc.add(g.to_f64() - e / s);
                }
            }
        }
    }
    let n = acc.n.max(1) as f64;
    Ok(ErrorReport {
        function,
        precision: precision.bits(),
        hyp_stages: plan.hyperbolic_stages,
        lin_stages: plan.linear_stages,
        samples,
        mae: acc.sum / n,
        mse: acc.sum_sq / n,
        max_abs_err: acc.max,
        seed,
    })
}

fn softmax_checked(xs: &[Fxp], p: Precision, plan: &StagePlan) -> Result<Vec<Fxp>, HarnessError> {
    crate::pe::PeConfig::af(p, crate::pe::AfSelect::Softmax)?;
    Ok(softmax_run(xs, plan)?)
}

/// Which stage count a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Hyperbolic stages vary; linear fixed at the precision.
    Hyperbolic,
    /// Linear stages vary; hyperbolic fixed at the precision.
    Linear,
    /// Both vary together.
    Both,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hyperbolic" | "hyp" => Ok(SweepAxis::Hyperbolic),
            "linear" | "lin" => Ok(SweepAxis::Linear),
            "both" => Ok(SweepAxis::Both),
            _ => Err(format!("unknown sweep axis '{s}' (hyp, lin or both)")),
        }
    }
}

pub fn sweep_plan(axis: SweepAxis, k: u32, bits: u32) -> Result<StagePlan, HarnessError> {
    let (h, l) = match axis {
        SweepAxis::Hyperbolic => (k, bits),
        SweepAxis::Linear => (bits, k),
        SweepAxis::Both => (k, k),
    };
    StagePlan::new(h, l, bits).map_err(|_| HarnessError::StageRange {
        stage: k,
        precision: bits,
    })
}

/// One report per stage count, all from the same seed.
pub fn pareto_sweep(
    function: Function,
    precision: Precision,
    stages: std::ops::RangeInclusive<u32>,
    axis: SweepAxis,
    seed: u64,
) -> Result<Vec<ErrorReport>, HarnessError> {
    stages
        .map(|k| {
            let plan = sweep_plan(axis, k, precision.bits())?;
            mc_error(function, precision, &plan, seed)
        })
        .collect()
}

/// Plan of the first report whose MAE is within `lsb_floor` of the last
/// report's MAE.
pub fn knee_select(reports: &[ErrorReport], lsb_floor: f64) -> Result<StagePlan, HarnessError> {
    let last = reports.last().ok_or(HarnessError::Empty)?;
    let hit = reports
        .iter()
        .find(|r| r.mae - last.mae <= lsb_floor)
        .unwrap_or(last);
    Ok(hit.plan())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KneeResult {
    pub function: Function,
    pub precision: u32,
    pub lsb_floor: f64,
    pub selected: StagePlan,
    pub default: StagePlan,
    pub agrees: bool,
}

/// Sweeps each axis over 1..=N (the other axis at N) and picks the knee of
/// each; the result is compared with the default plan.
pub fn select_plan(
    function: Function,
    precision: Precision,
    seed: u64,
) -> Result<KneeResult, HarnessError> {
    let bits = precision.bits();
    let floor = precision.af_format().lsb();
    let default = precision.default_plan();
    let h = if function.uses_hyperbolic() {
        let r = pareto_sweep(function, precision, 1..=bits, SweepAxis::Hyperbolic, seed)?;
        knee_select(&r, floor)?.hyperbolic_stages
    } else {
        default.hyperbolic_stages
    };
    let l = if function.uses_linear() {
        let r = pareto_sweep(function, precision, 1..=bits, SweepAxis::Linear, seed)?;
        knee_select(&r, floor)?.linear_stages
    } else {
        default.linear_stages
    };
    let selected = StagePlan::new(h, l, bits)?;
    Ok(KneeResult {
        function,
        precision: bits,
        lsb_floor: floor,
        selected,
        default,
        agrees: selected == default,
    })
}

pub const CSV_HEADER: &str = "function,precision,hyp_stages,lin_stages,samples,mae,mse,max_abs_err,seed";

pub fn reports_csv(reports: &[ErrorReport]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in reports {
        w.serialize(r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("flush")).expect("utf-8");
    format!("{CSV_HEADER}\n{body}")
}

#[derive(Serialize)]
struct JsonReports<'a> {
    prng: &'a str,
    records: &'a [ErrorReport],
}

pub fn reports_json(reports: &[ErrorReport]) -> serde_json::Value {
    serde_json::to_value(JsonReports {
        prng: PRNG_ID,
        records: reports,
    })
    .expect("plain data")
}
