//! R x C array of PEs: weight-stationary GEMM, im2col convolution,
//! loop-nest tiling with element-granularity DMA counters, a throughput
//! model and the workload descriptor format.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cordic::{lr_mac, CordicError};
use crate::fixedpoint::{pack_lanes, unpack_lanes, FixedError, Fxp, LaneConfig, QFormat};
use crate::pe::{pe_execute, AfSelect, PeConfig, PeError, Precision, LOAD_CYCLES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystolicError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{operand} tile needs {need} elements but the buffer holds {capacity}")]
    Buffer {
        operand: &'static str,
        need: u64,
        capacity: u64,
    },
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("workload line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Pe(#[from] PeError),
    #[error(transparent)]
    Cordic(#[from] CordicError),
    #[error(transparent)]
    Fixed(#[from] FixedError),
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T, SystolicError> {
    Err(SystolicError::Shape(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataflow {
    WeightStationary,
    OutputStationary,
}

impl Dataflow {
    /// Tile loops, outermost first.
    pub fn loop_order(self) -> [Dim; 6] {
        use Dim::*;
        match self {
            Dataflow::WeightStationary => [Co, Ci, Kh, Kw, Oh, Ow],
            Dataflow::OutputStationary => [Co, Oh, Ow, Ci, Kh, Kw],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dataflow::WeightStationary => "weight_stationary",
            Dataflow::OutputStationary => "output_stationary",
        }
    }
}

impl FromStr for Dataflow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "weight_stationary" | "ws" => Ok(Dataflow::WeightStationary),
            "output_stationary" | "os" => Ok(Dataflow::OutputStationary),
            _ => Err(format!("unknown dataflow '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub pe: PeConfig,
    pub dataflow: Dataflow,
    /// AF applied to every output of run_conv2d.
    pub fused_af: Option<AfSelect>,
}

impl ArrayConfig {
    pub fn new(rows: usize, cols: usize, pe: PeConfig) -> Result<Self, SystolicError> {
        let cfg = Self {
            rows,
            cols,
            pe,
            dataflow: Dataflow::WeightStationary,
            fused_af: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 8x8, weight-stationary, MAC with the precision's default plan.
    pub fn default_for(precision: Precision) -> Result<Self, SystolicError> {
        Self::new(8, 8, PeConfig::mac(precision)?)
    }

    pub fn validate(&self) -> Result<(), SystolicError> {
        if self.rows == 0 || self.cols == 0 {
            return shape_err(format!("array must be at least 1x1, got {}x{}", self.rows, self.cols));
        }
        if LaneConfig::uniform(self.pe.precision.bits()).is_none() {
            return shape_err(format!(
                "the array runs uniform precisions only, got {}",
                self.pe.precision
            ));
        }
        self.pe.validate()?;
        Ok(())
    }

    /// Rows of A (one per lane) handled by one PE issue.
    pub fn rows_per_issue(&self) -> usize {
        (self.pe.precision.results_per_issue() * self.pe.fold_factor()) as usize
    }
}

/// Dense row-major matrix of values sharing one format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    format: QFormat,
    data: Vec<Fxp>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize, format: QFormat) -> Self {
        Self {
            rows,
            cols,
            format,
            data: vec![Fxp::zero(format); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, format: QFormat, mut f: impl FnMut(usize, usize) -> Fxp) -> Result<Self, SystolicError> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                if v.format() != format {
                    return Err(FixedError::FormatMismatch(format, v.format()).into());
                }
                data.push(v);
            }
        }
        Ok(Self { rows, cols, format, data })
    }

    pub fn from_f64(rows: usize, cols: usize, format: QFormat, values: &[f64]) -> Result<Self, SystolicError> {
        if values.len() != rows * cols {
            return shape_err(format!("{} values for a {rows}x{cols} matrix", values.len()));
        }
        Self::from_fn(rows, cols, format, |i, j| crate::fixedpoint::quantize(values[i * cols + j], format))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn format(&self) -> QFormat {
        self.format
    }

    pub fn get(&self, i: usize, j: usize) -> Fxp {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Fxp) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[Fxp] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }
}

fn check_gemm(a: &Matrix, b: &Matrix) -> Result<(), SystolicError> {
    if a.cols != b.rows {
        return shape_err(format!(
            "inner dimensions differ: A is {}x{}, B is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    if a.format != b.format {
        return Err(FixedError::FormatMismatch(a.format, b.format).into());
    }
    Ok(())
}

/// Triple loop, k ascending, through the same MAC.
pub fn direct_gemm(a: &Matrix, b: &Matrix, stages: u32) -> Result<Matrix, SystolicError> {
    check_gemm(a, b)?;
    let mut c = Matrix::zeros(a.rows, b.cols, a.format);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = Fxp::zero(a.format);
            for k in 0..a.cols {
                acc = lr_mac(a.get(i, k), b.get(k, j), acc, stages)?;
            }
            c.set(i, j, acc);
        }
    }
    Ok(c)
}

type Tagged = Option<(usize, Vec<Fxp>)>;

/// One weight tile on the array. Returns the number of hops until the last
/// partial sum leaves the bottom row.
#[allow(clippy::too_many_arguments)]
fn run_tile(
    a: &Matrix,
    b: &Matrix,
    acc: &mut Matrix,
    k0: usize,
    n0: usize,
    r_used: usize,
    c_used: usize,
    group: usize,
    stages: u32,
) -> Result<u64, SystolicError> {
    let m = a.rows;
    let groups = m.div_ceil(group);
    let rows_of = |g: usize| g * group..((g + 1) * group).min(m);
    let mut a_reg: Vec<Tagged> = vec![None; r_used * c_used];
    let mut p_reg: Vec<Tagged> = vec![None; r_used * c_used];
    let at = |r: usize, c: usize| r * c_used + c;
    let mut emitted = 0;
    let mut hops = 0u64;
    while emitted < groups * c_used {
        let mut a_next: Vec<Tagged> = vec![None; r_used * c_used];
        let mut p_next: Vec<Tagged> = vec![None; r_used * c_used];
        for r in 0..r_used {
            for c in 0..c_used {
                let a_in = if c == 0 {
                    let g = (hops as usize).checked_sub(r).filter(|&g| g < groups);
                    g.map(|g| (g, rows_of(g).map(|i| a.get(i, k0 + r)).collect()))
                } else {
                    a_reg[at(r, c - 1)].clone()
                };
                let Some((g, av)) = a_in else { continue };
                let p_in = if r == 0 {
                    rows_of(g).map(|i| acc.get(i, n0 + c)).collect()
                } else {
                    match &p_reg[at(r - 1, c)] {
                        Some((g2, v)) if *g2 == g => v.clone(),
                        other => unreachable!("skew broken at ({r},{c}): {other:?} vs group {g}"),
                    }
                };
                let w = b.get(k0 + r, n0 + c);
                let out = av
                    .iter()
                    .zip(&p_in)
                    .map(|(&x, &p)| lr_mac(x, w, p, stages))
                    .collect::<Result<Vec<_>, _>>()?;
                a_next[at(r, c)] = Some((g, av));
                p_next[at(r, c)] = Some((g, out));
            }
        }
        for c in 0..c_used {
            if let Some((g, v)) = &p_next[at(r_used - 1, c)] {
                for (i, &x) in rows_of(*g).zip(v) {
                    acc.set(i, n0 + c, x);
                }
                emitted += 1;
            }
        }
        a_reg = a_next;
        p_reg = p_next;
        hops += 1;
    }
    Ok(hops)
}

fn tile_cycles(r_used: usize, hops: u64, stages: u32) -> u64 {
    // weight preload one row per cycle, one hop per issue slot, then the
    // last MAC drains through its stages
    r_used as u64 + LOAD_CYCLES * hops + stages as u64
}

/// Closed-form cycle count of [`systolic_gemm`] for an m x k by k x n product.
pub fn gemm_cycles(m: usize, k: usize, n: usize, cfg: &ArrayConfig) -> u64 {
    if m == 0 || k == 0 || n == 0 {
        return 0;
    }
    let groups = m.div_ceil(cfg.rows_per_issue());
    let stages = cfg.pe.plan.linear_stages;
    let mut total = 0;
    for k0 in (0..k).step_by(cfg.rows) {
        let r = cfg.rows.min(k - k0);
        for n0 in (0..n).step_by(cfg.cols) {
            let c = cfg.cols.min(n - n0);
            total += tile_cycles(r, (groups + r + c - 2) as u64, stages);
        }
    }
    total
}

/// Weight-stationary product on the array. B is tiled rows x cols and
/// pinned; A streams in from the left with a one-hop skew per row, and
/// partial sums flow down and carry into the next k tile, so every output
/// accumulates k in ascending order. Returns C and the stepped cycle count.
pub fn systolic_gemm(a: &Matrix, b: &Matrix, cfg: &ArrayConfig) -> Result<(Matrix, u64), SystolicError> {
    check_gemm(a, b)?;
    cfg.validate()?;
    if a.format != cfg.pe.precision.mac_format() {
        return Err(FixedError::FormatMismatch(cfg.pe.precision.mac_format(), a.format).into());
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut acc = Matrix::zeros(m, n, a.format);
    let stages = cfg.pe.plan.linear_stages;
    let mut cycles = 0;
    if m == 0 {
        return Ok((acc, 0));
    }
    for k0 in (0..k).step_by(cfg.rows) {
        let r = cfg.rows.min(k - k0);
        for n0 in (0..n).step_by(cfg.cols) {
            let c = cfg.cols.min(n - n0);
            let hops = run_tile(a, b, &mut acc, k0, n0, r, c, cfg.rows_per_issue(), stages)?;
            cycles += tile_cycles(r, hops, stages);
        }
    }
    Ok((acc, cycles))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dim {
    Co,
    Ci,
    Kh,
    Kw,
    Oh,
    Ow,
}

impl Dim {
    pub const ALL: [Dim; 6] = [Dim::Co, Dim::Ci, Dim::Kh, Dim::Kw, Dim::Oh, Dim::Ow];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvShape {
    pub h: u64,
    pub w: u64,
    pub c_in: u64,
    pub c_out: u64,
    pub k: u64,
    pub stride: u64,
    pub pad: u64,
}

impl ConvShape {
    pub fn new(h: u64, w: u64, c_in: u64, c_out: u64, k: u64, stride: u64, pad: u64) -> Result<Self, SystolicError> {
        let s = Self {
            h,
            w,
            c_in,
            c_out,
            k,
            stride,
            pad,
        };
        s.validate()?;
        Ok(s)
    }

    /// A (m x k) by B (k x n) product as a 1x1 convolution over an m x 1
    /// image with k channels.
    pub fn gemm(m: u64, k: u64, n: u64) -> Result<Self, SystolicError> {
        Self::new(m, 1, k, n, 1, 1, 0)
    }

    pub fn validate(&self) -> Result<(), SystolicError> {
        if [self.h, self.w, self.c_in, self.c_out, self.k, self.stride].contains(&0) {
            return shape_err(format!("zero dimension in {self}"));
        }
        if self.h + 2 * self.pad < self.k || self.w + 2 * self.pad < self.k {
            return shape_err(format!("kernel larger than padded input in {self}"));
        }
        if self.k <= self.pad {
            return shape_err(format!("padding must be smaller than the kernel in {self}"));
        }
        Ok(())
    }

    pub fn out_h(&self) -> u64 {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> u64 {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn size(&self, d: Dim) -> u64 {
        match d {
            Dim::Co => self.c_out,
            Dim::Ci => self.c_in,
            Dim::Kh | Dim::Kw => self.k,
            Dim::Oh => self.out_h(),
            Dim::Ow => self.out_w(),
        }
    }

    pub fn macs(&self) -> u64 {
        self.c_out * self.out_h() * self.out_w() * self.c_in * self.k * self.k
    }

    pub fn weight_elems(&self) -> u64 {
        self.c_out * self.c_in * self.k * self.k
    }

    pub fn ifmap_elems(&self) -> u64 {
        self.c_in * self.h * self.w
    }

    pub fn ofmap_elems(&self) -> u64 {
        self.c_out * self.out_h() * self.out_w()
    }
}

impl fmt::Display for ConvShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "H={} W={} Cin={} Cout={} K={} stride={} pad={}",
            self.h, self.w, self.c_in, self.c_out, self.k, self.stride, self.pad
        )
    }
}

/// On-chip buffer capacities in elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Buffers {
    pub ifmap: u64,
    pub weight: u64,
    pub psum: u64,
}

impl Buffers {
    pub const PRESETS: [(&'static str, Buffers); 3] = [
        ("small", Buffers::uniform_pair(16 << 10, 8 << 10)),
        ("medium", Buffers::uniform_pair(128 << 10, 64 << 10)),
        ("large", Buffers::uniform_pair(1 << 20, 512 << 10)),
    ];

    const fn uniform_pair(operand: u64, psum: u64) -> Self {
        Self {
            ifmap: operand,
            weight: operand,
            psum,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Self::PRESETS.iter().find(|(n, _)| *n == name).map(|&(_, b)| b)
    }

    pub fn scaled(self, num: u64, den: u64) -> Self {
        Self {
            ifmap: self.ifmap * num / den,
            weight: self.weight * num / den,
            psum: self.psum * num / den,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tiles {
    pub co: u64,
    pub ci: u64,
    pub kh: u64,
    pub kw: u64,
    pub oh: u64,
    pub ow: u64,
}

impl Tiles {
    pub const UNIT: Tiles = Tiles {
        co: 1,
        ci: 1,
        kh: 1,
        kw: 1,
        oh: 1,
        ow: 1,
    };

    pub fn full(shape: &ConvShape) -> Self {
        let mut t = Self::UNIT;
        for d in Dim::ALL {
            t.set(d, shape.size(d));
        }
        t
    }

    pub fn get(&self, d: Dim) -> u64 {
        match d {
            Dim::Co => self.co,
            Dim::Ci => self.ci,
            Dim::Kh => self.kh,
            Dim::Kw => self.kw,
            Dim::Oh => self.oh,
            Dim::Ow => self.ow,
        }
    }

    pub fn set(&mut self, d: Dim, v: u64) {
        match d {
            Dim::Co => self.co = v,
            Dim::Ci => self.ci = v,
            Dim::Kh => self.kh = v,
            Dim::Kw => self.kw = v,
            Dim::Oh => self.oh = v,
            Dim::Ow => self.ow = v,
        }
    }
}

const WEIGHT_DIMS: [Dim; 4] = [Dim::Co, Dim::Ci, Dim::Kh, Dim::Kw];
const IFMAP_DIMS: [Dim; 5] = [Dim::Ci, Dim::Kh, Dim::Kw, Dim::Oh, Dim::Ow];
const OUTPUT_DIMS: [Dim; 3] = [Dim::Co, Dim::Oh, Dim::Ow];

/// Input rows (or columns) spanned by `t_out` outputs and `t_k` taps,
/// capped at the input extent.
fn span(t_out: u64, t_k: u64, stride: u64, input: u64) -> u64 {
    ((t_out - 1) * stride + t_k).min(input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSchedule {
    /// Tile loops, outermost first.
    pub order: [Dim; 6],
    pub tiles: Tiles,
    pub buffers: Buffers,
}

impl TileSchedule {
    pub fn new(order: [Dim; 6], tiles: Tiles, buffers: Buffers, shape: &ConvShape) -> Result<Self, SystolicError> {
        let s = Self { order, tiles, buffers };
        s.validate(shape)?;
        Ok(s)
    }

    pub fn weight_footprint(&self, _shape: &ConvShape) -> u64 {
        let t = &self.tiles;
        t.co * t.ci * t.kh * t.kw
    }

    /// Worst-case ifmap tile, counting the halo.
    pub fn ifmap_footprint(&self, shape: &ConvShape) -> u64 {
        let t = &self.tiles;
        t.ci * span(t.oh, t.kh, shape.stride, shape.h) * span(t.ow, t.kw, shape.stride, shape.w)
    }

    pub fn psum_footprint(&self, _shape: &ConvShape) -> u64 {
        let t = &self.tiles;
        t.co * t.oh * t.ow
    }

    pub fn validate(&self, shape: &ConvShape) -> Result<(), SystolicError> {
        shape.validate()?;
        let mut seen = HashSet::new();
        if !self.order.iter().all(|d| seen.insert(*d)) {
            return Err(SystolicError::Schedule(format!(
                "loop order {:?} repeats a dimension",
                self.order
            )));
        }
        for d in Dim::ALL {
            let t = self.tiles.get(d);
            if t == 0 || t > shape.size(d) {
                return Err(SystolicError::Schedule(format!(
                    "tile {t} for {d:?} is outside 1..={}",
                    shape.size(d)
                )));
            }
        }
        for (operand, need, capacity) in [
            ("weight", self.weight_footprint(shape), self.buffers.weight),
            ("ifmap", self.ifmap_footprint(shape), self.buffers.ifmap),
            ("psum", self.psum_footprint(shape), self.buffers.psum),
        ] {
            if need > capacity {
                return Err(SystolicError::Buffer {
                    operand,
                    need,
                    capacity,
                });
            }
        }
        Ok(())
    }

    pub fn trips(&self, shape: &ConvShape, d: Dim) -> u64 {
        shape.size(d).div_ceil(self.tiles.get(d))
    }

    /// Largest tiles the buffers allow, grown along fixed doubling chains.
    ///
    /// Each buffer grows its own dims one doubling at a time in a fixed
    /// order and stops at the first step that would overflow it; a tile is
    /// the smallest size any of its buffers allows. Chains are prefixes of
    /// one sequence, so larger buffers never shrink a tile.
    pub fn choose(shape: &ConvShape, buffers: Buffers, dataflow: Dataflow) -> Result<Self, SystolicError> {
        shape.validate()?;
        let weight = grow_chain(
            shape,
            &[&[Dim::Kh, Dim::Kw], &[Dim::Ci, Dim::Co]],
            buffers.weight,
            |t| t.co * t.ci * t.kh * t.kw,
        );
        let ifmap = grow_chain(
            shape,
            &[&[Dim::Kh, Dim::Kw], &[Dim::Oh, Dim::Ow, Dim::Ci]],
            buffers.ifmap,
            |t| t.ci * span(t.oh, t.kh, shape.stride, shape.h) * span(t.ow, t.kw, shape.stride, shape.w),
        );
        let psum = grow_chain(shape, &[&[Dim::Oh, Dim::Ow, Dim::Co]], buffers.psum, |t| t.co * t.oh * t.ow);
        let mut tiles = Tiles::UNIT;
        for d in Dim::ALL {
            let mut t = shape.size(d);
            for (chain, dims) in [
                (&weight, &WEIGHT_DIMS[..]),
                (&ifmap, &IFMAP_DIMS[..]),
                (&psum, &OUTPUT_DIMS[..]),
            ] {
                if dims.contains(&d) {
                    t = t.min(chain.get(d));
                }
            }
            tiles.set(d, t);
        }
        Self::new(dataflow.loop_order(), tiles, buffers, shape)
    }
}

fn grow_chain(shape: &ConvShape, phases: &[&[Dim]], budget: u64, cost: impl Fn(&Tiles) -> u64) -> Tiles {
    let mut t = Tiles::UNIT;
    for phase in phases {
        loop {
            let mut grew = false;
            for &d in *phase {
                let cur = t.get(d);
                let cap = shape.size(d);
                if cur == cap {
                    continue;
                }
                let mut next = t;
                next.set(d, (cur * 2).min(cap));
                if cost(&next) > budget {
                    return t;
                }
                t = next;
                grew = true;
            }
            if !grew {
                break;
            }
        }
    }
    t
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DmaCounter {
    pub ifmap_reads: u64,
    pub weight_reads: u64,
    pub psum_writes: u64,
    pub psum_reads: u64,
}

impl DmaCounter {
    pub fn total_reads(&self) -> u64 {
        self.ifmap_reads + self.weight_reads + self.psum_reads
    }

    pub fn add(&mut self, o: &DmaCounter) {
        self.ifmap_reads += o.ifmap_reads;
        self.weight_reads += o.weight_reads;
        self.psum_writes += o.psum_writes;
        self.psum_reads += o.psum_reads;
    }
}

/// Every MAC fetches its operands and round-trips its partial sum.
/// Padding taps are not fetched.
pub fn naive_counts(shape: &ConvShape) -> DmaCounter {
    let inb = |out: u64, input: u64| -> u64 {
        let mut n = 0;
        for o in 0..out {
            for k in 0..shape.k {
                let i = (o * shape.stride + k) as i64 - shape.pad as i64;
                if (0..input as i64).contains(&i) {
                    n += 1;
                }
            }
        }
        n
    };
    let macs = shape.macs();
    DmaCounter {
        ifmap_reads: shape.c_out * shape.c_in * inb(shape.out_h(), shape.h) * inb(shape.out_w(), shape.w),
        weight_reads: macs,
        psum_writes: macs,
        psum_reads: macs - shape.ofmap_elems(),
    }
}

/// Unique in-bounds input indices per (output tile, kernel tile) pair,
/// indexed [out_tile][k_tile].
fn halo_table(out: u64, t_out: u64, k: u64, t_k: u64, stride: u64, pad: u64, input: u64) -> Vec<Vec<u64>> {
    let mut stamp = vec![usize::MAX; input as usize];
    let mut id = 0;
    let mut table = Vec::new();
    for o0 in (0..out).step_by(t_out as usize) {
        let mut row = Vec::new();
        for k0 in (0..k).step_by(t_k as usize) {
            let mut n = 0;
            for o in o0..(o0 + t_out).min(out) {
                for kk in k0..(k0 + t_k).min(k) {
                    let i = (o * stride + kk) as i64 - pad as i64;
                    if (0..input as i64).contains(&i) && stamp[i as usize] != id {
                        stamp[i as usize] = id;
                        n += 1;
                    }
                }
            }
            row.push(n);
            id += 1;
        }
        table.push(row);
    }
    table
}

struct Halo {
    rows: Vec<Vec<u64>>,
    cols: Vec<Vec<u64>>,
}

impl Halo {
    fn new(shape: &ConvShape, t: &Tiles) -> Self {
        Self {
            rows: halo_table(shape.out_h(), t.oh, shape.k, t.kh, shape.stride, shape.pad, shape.h),
            cols: halo_table(shape.out_w(), t.ow, shape.k, t.kw, shape.stride, shape.pad, shape.w),
        }
    }
}

/// Loads of one operand per pass over its tiles: the product of the trips
/// of unrelated loops that sit outside its innermost changing loop.
fn reload_factor(sched: &TileSchedule, shape: &ConvShape, relevant: &[Dim]) -> u64 {
    let moving = |d: &Dim| sched.trips(shape, *d) > 1;
    match sched.order.iter().rposition(|d| relevant.contains(d) && moving(d)) {
        None => 1,
        Some(p) => sched.order[..p]
            .iter()
            .filter(|d| !relevant.contains(d))
            .map(|d| sched.trips(shape, *d))
            .product(),
    }
}

/// Closed-form counts: each tile is fetched once per residency and an
/// operand stays resident while its tile coordinates are unchanged.
pub fn dma_counts(shape: &ConvShape, sched: &TileSchedule) -> DmaCounter {
    let halo = Halo::new(shape, &sched.tiles);
    let rows: u64 = halo.rows.iter().flatten().sum();
    let cols: u64 = halo.cols.iter().flatten().sum();
    let outputs = shape.ofmap_elems();
    let psum_writes = outputs * reload_factor(sched, shape, &OUTPUT_DIMS);
    DmaCounter {
        ifmap_reads: shape.c_in * rows * cols * reload_factor(sched, shape, &IFMAP_DIMS),
        weight_reads: shape.weight_elems() * reload_factor(sched, shape, &WEIGHT_DIMS),
        psum_writes,
        psum_reads: psum_writes - outputs,
    }
}

/// Iterations [`dma_walk`] would take.
pub fn walk_iterations(shape: &ConvShape, sched: &TileSchedule) -> u64 {
    Dim::ALL.iter().map(|&d| sched.trips(shape, d)).product()
}

/// Steps through the tile loop nest and counts every load, write-back and
/// read-back.
pub fn dma_walk(shape: &ConvShape, sched: &TileSchedule) -> DmaCounter {
    let halo = Halo::new(shape, &sched.tiles);
    let trips: Vec<u64> = sched.order.iter().map(|&d| sched.trips(shape, d)).collect();
    let len = |d: Dim, idx: u64| {
        let t = sched.tiles.get(d);
        t.min(shape.size(d) - idx * t)
    };
    let mut idx = [0u64; 6];
    let mut c = DmaCounter::default();
    let mut w_prev = None;
    let mut i_prev = None;
    let mut o_prev: Option<[u64; 3]> = None;
    let mut o_seen = HashSet::new();
    let out_elems = |o: [u64; 3]| len(Dim::Co, o[0]) * len(Dim::Oh, o[1]) * len(Dim::Ow, o[2]);
    loop {
        let at = |d: Dim| idx[sched.order.iter().position(|x| *x == d).unwrap()];
        let (co, ci, kh, kw, oh, ow) = (at(Dim::Co), at(Dim::Ci), at(Dim::Kh), at(Dim::Kw), at(Dim::Oh), at(Dim::Ow));
        if w_prev != Some([co, ci, kh, kw]) {
            c.weight_reads += len(Dim::Co, co) * len(Dim::Ci, ci) * len(Dim::Kh, kh) * len(Dim::Kw, kw);
            w_prev = Some([co, ci, kh, kw]);
        }
        if i_prev != Some([ci, kh, kw, oh, ow]) {
            c.ifmap_reads += len(Dim::Ci, ci) * halo.rows[oh as usize][kh as usize] * halo.cols[ow as usize][kw as usize];
            i_prev = Some([ci, kh, kw, oh, ow]);
        }
        let o = [co, oh, ow];
        if o_prev != Some(o) {
            if let Some(p) = o_prev {
                c.psum_writes += out_elems(p);
            }
            if !o_seen.insert(o) {
                c.psum_reads += out_elems(o);
            }
            o_prev = Some(o);
        }
        // odometer, innermost loop last
        let mut p = 5;
        loop {
            idx[p] += 1;
            if idx[p] < trips[p] {
                break;
            }
            idx[p] = 0;
            if p == 0 {
                if let Some(p) = o_prev {
                    c.psum_writes += out_elems(p);
                }
                return c;
            }
            p -= 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmaReport {
    pub shape: ConvShape,
    pub schedule: TileSchedule,
    pub naive: DmaCounter,
    /// Loop-nest closed form.
    pub analytic: DmaCounter,
    /// Tile walk, when it is cheap enough to run.
    pub measured: Option<DmaCounter>,
    pub ifmap_factor: f64,
    pub weight_factor: f64,
    pub analytic_ifmap_factor: f64,
    pub analytic_weight_factor: f64,
    pub cycles: u64,
}

/// Tile walks longer than this are skipped in reports.
pub const WALK_LIMIT: u64 = 1 << 22;

fn ratio(naive: u64, scheduled: u64) -> f64 {
    if scheduled == 0 {
        1.0
    } else {
        naive as f64 / scheduled as f64
    }
}

/// Reduction factors against the no-reuse baseline. Measured factors come
/// from the tile walk; when the walk is skipped they repeat the analytic ones.
pub fn dma_report(shape: &ConvShape, sched: &TileSchedule, cfg: &ArrayConfig) -> Result<DmaReport, SystolicError> {
    sched.validate(shape)?;
    let naive = naive_counts(shape);
    let analytic = dma_counts(shape, sched);
    let measured = (walk_iterations(shape, sched) <= WALK_LIMIT).then(|| dma_walk(shape, sched));
    let m = measured.unwrap_or(analytic);
    let gemm = (
        (shape.out_h() * shape.out_w()) as usize,
        (shape.k * shape.k * shape.c_in) as usize,
        shape.c_out as usize,
    );
    Ok(DmaReport {
        shape: *shape,
        schedule: *sched,
        naive,
        analytic,
        measured,
        ifmap_factor: ratio(naive.ifmap_reads, m.ifmap_reads),
        weight_factor: ratio(naive.weight_reads, m.weight_reads),
        analytic_ifmap_factor: ratio(naive.ifmap_reads, analytic.ifmap_reads),
        analytic_weight_factor: ratio(naive.weight_reads, analytic.weight_reads),
        cycles: gemm_cycles(gemm.0, gemm.1, gemm.2, cfg),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GemmRun {
    pub c: Matrix,
    pub counters: DmaCounter,
    pub cycles: u64,
}

/// C = A B on the array; DMA counted on the product viewed as a 1x1
/// convolution under `sched`.
pub fn run_gemm(a: &Matrix, b: &Matrix, cfg: &ArrayConfig, sched: &TileSchedule) -> Result<GemmRun, SystolicError> {
    check_gemm(a, b)?;
    let shape = ConvShape::gemm(a.rows as u64, a.cols as u64, b.cols as u64)?;
    sched.validate(&shape)?;
    let (c, cycles) = systolic_gemm(a, b, cfg)?;
    Ok(GemmRun {
        c,
        counters: dma_counts(&shape, sched),
        cycles,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvRun {
    /// [c_out][out_h][out_w].
    pub ofmap: Vec<Fxp>,
    pub counters: DmaCounter,
    pub cycles: u64,
}

fn check_len(what: &str, got: usize, want: u64) -> Result<(), SystolicError> {
    if got as u64 != want {
        return shape_err(format!("{what} has {got} elements, shape needs {want}"));
    }
    Ok(())
}

/// Rows (oh, ow), columns (kh, kw, ci). Padding taps are zero.
pub fn im2col(ifmap: &[Fxp], shape: &ConvShape, format: QFormat) -> Result<Matrix, SystolicError> {
    check_len("ifmap", ifmap.len(), shape.ifmap_elems())?;
    let (h, w, ci, k) = (shape.h as i64, shape.w as i64, shape.c_in as usize, shape.k as usize);
    let ow = shape.out_w() as usize;
    let cols = k * k * ci;
    Matrix::from_fn((shape.out_h() * shape.out_w()) as usize, cols, format, |r, col| {
        let (oy, ox) = ((r / ow) as i64, (r % ow) as i64);
        let (kh, rest) = (col / (k * ci), col % (k * ci));
        let (kw, c) = (rest / ci, rest % ci);
        let y = oy * shape.stride as i64 + kh as i64 - shape.pad as i64;
        let x = ox * shape.stride as i64 + kw as i64 - shape.pad as i64;
        if (0..h).contains(&y) && (0..w).contains(&x) {
            ifmap[(c as i64 * h * w + y * w + x) as usize]
        } else {
            Fxp::zero(format)
        }
    })
}

/// [c_out][c_in][kh][kw] weights as the (kh, kw, ci) x c_out matrix.
pub fn weight_matrix(weights: &[Fxp], shape: &ConvShape, format: QFormat) -> Result<Matrix, SystolicError> {
    check_len("weights", weights.len(), shape.weight_elems())?;
    let (ci, k) = (shape.c_in as usize, shape.k as usize);
    Matrix::from_fn(k * k * ci, shape.c_out as usize, format, |row, co| {
        let (kh, rest) = (row / (k * ci), row % (k * ci));
        let (kw, c) = (rest / ci, rest % ci);
        weights[((co * ci + c) * k + kh) * k + kw]
    })
}

/// Applies `af` through the PE, lane-packed at the array's precision.
/// ReLU keeps the values' own format; the others convert to the AF format.
pub fn apply_af(values: &[Fxp], af: AfSelect, cfg: &ArrayConfig) -> Result<Vec<Fxp>, SystolicError> {
    if af == AfSelect::Softmax {
        return shape_err("softmax is a classifier op, not a fused per-output AF");
    }
    let p = cfg.pe.precision;
    let pe = PeConfig {
        af,
        op: crate::pe::CtrlOp::Af,
        ..cfg.pe
    };
    let format = if af == AfSelect::Relu {
        values.first().map_or(p.mac_format(), |v| v.format())
    } else {
        p.af_format()
    };
    let lanes = LaneConfig::uniform(p.bits()).expect("validated uniform precision");
    let mut out = Vec::with_capacity(values.len());
    for chunk in values.chunks(lanes.lanes()) {
        let mut lane_vals: Vec<Fxp> = chunk.iter().map(|v| v.convert(format)).collect();
        lane_vals.resize(lanes.lanes(), Fxp::zero(format));
        let w = pe_execute(&pack_lanes(&lane_vals, lanes)?, &pe)?;
        out.extend(unpack_lanes(&w).into_iter().take(chunk.len()));
    }
    Ok(out)
}

/// Convolution through im2col and the array, with the optional fused AF.
pub fn run_conv2d(
    ifmap: &[Fxp],
    weights: &[Fxp],
    shape: &ConvShape,
    cfg: &ArrayConfig,
    sched: &TileSchedule,
) -> Result<ConvRun, SystolicError> {
    sched.validate(shape)?;
    let f = cfg.pe.precision.mac_format();
    let a = im2col(ifmap, shape, f)?;
    let b = weight_matrix(weights, shape, f)?;
    let (c, cycles) = systolic_gemm(&a, &b, cfg)?;
    let (hw, co) = (c.rows(), c.cols());
    let mut ofmap = Vec::with_capacity(hw * co);
    for ch in 0..co {
        for r in 0..hw {
            ofmap.push(c.get(r, ch));
        }
    }
    if let Some(af) = cfg.fused_af {
        ofmap = apply_af(&ofmap, af, cfg)?;
    }
    Ok(ConvRun {
        ofmap,
        counters: dma_counts(shape, sched),
        cycles,
    })
}

/// Nested-loop convolution through the same MAC, (kh, kw, ci) ascending.
pub fn direct_conv2d(ifmap: &[Fxp], weights: &[Fxp], shape: &ConvShape, format: QFormat, stages: u32) -> Result<Vec<Fxp>, SystolicError> {
    check_len("ifmap", ifmap.len(), shape.ifmap_elems())?;
    check_len("weights", weights.len(), shape.weight_elems())?;
    let (h, w, ci, k) = (shape.h as i64, shape.w as i64, shape.c_in as usize, shape.k as usize);
    let mut out = Vec::with_capacity(shape.ofmap_elems() as usize);
    for co in 0..shape.c_out as usize {
        for oy in 0..shape.out_h() as i64 {
            for ox in 0..shape.out_w() as i64 {
                let mut acc = Fxp::zero(format);
                for kh in 0..k {
                    for kw in 0..k {
                        for c in 0..ci {
                            let y = oy * shape.stride as i64 + kh as i64 - shape.pad as i64;
                            let x = ox * shape.stride as i64 + kw as i64 - shape.pad as i64;
                            let a = if (0..h).contains(&y) && (0..w).contains(&x) {
                                ifmap[(c as i64 * h * w + y * w + x) as usize]
                            } else {
                                Fxp::zero(format)
                            };
                            acc = lr_mac(a, weights[((co * ci + c) * k + kh) * k + kw], acc, stages)?;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub rows: usize,
    pub cols: usize,
    pub precision: Precision,
    pub lanes: u64,
    pub issue_rate: f64,
    pub ops_per_cycle: f64,
    pub clock_mhz: f64,
    pub gops: f64,
    /// 2 x MACs over the workload.
    pub workload_ops: u64,
    pub ideal_cycles: u64,
}

/// ops/cycle = 2 x rows x cols x lanes x issue rate (one issue every two
/// cycles, doubled by stage folding).
pub fn throughput_report(cfg: &ArrayConfig, workload: &[ConvShape], clock_mhz: f64) -> ThroughputReport {
    let lanes = cfg.pe.precision.results_per_issue();
    let issue_rate = cfg.pe.fold_factor() as f64 / LOAD_CYCLES as f64;
    let ops = 2.0 * (cfg.rows * cfg.cols) as f64 * lanes as f64 * issue_rate;
    let workload_ops: u64 = workload.iter().map(|s| 2 * s.macs()).sum();
    ThroughputReport {
        rows: cfg.rows,
        cols: cfg.cols,
        precision: cfg.pe.precision,
        lanes,
        issue_rate,
        ops_per_cycle: ops,
        clock_mhz,
        gops: ops * clock_mhz / 1000.0,
        workload_ops,
        ideal_cycles: (workload_ops as f64 / ops).ceil() as u64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub shape: ConvShape,
}

/// Parsed workload descriptor.
///
/// ```text
/// # comment
/// precision = 8
/// buffers = large            # preset, or ifmap_buffer / weight_buffer / psum_buffer
/// dataflow = weight_stationary
/// array = 8x8
/// clock_mhz = 200
/// layer conv1_1 H=224 W=224 Cin=3 Cout=64 K=3 stride=1 pad=1
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub name: String,
    pub precision: Precision,
    pub buffers: Option<Buffers>,
    pub dataflow: Dataflow,
    pub rows: usize,
    pub cols: usize,
    pub clock_mhz: f64,
    pub layers: Vec<Layer>,
}

impl Workload {
    pub fn parse(text: &str) -> Result<Self, SystolicError> {
        let mut wl = Workload {
            name: String::new(),
            precision: Precision::FxP8,
            buffers: None,
            dataflow: Dataflow::WeightStationary,
            rows: 8,
            cols: 8,
            clock_mhz: 200.0,
            layers: Vec::new(),
        };
        let mut parts: [Option<u64>; 3] = [None; 3];
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let err = |msg: String| SystolicError::Parse { line, msg };
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix("layer ") {
                wl.layers.push(parse_layer(rest).map_err(err)?);
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected 'key = value' or 'layer ...', got '{body}'")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| err(format!("'{key}' needs an integer, got '{v}'")));
            match key {
                "name" => wl.name = value.to_string(),
                "precision" => {
                    wl.precision = value.parse::<Precision>().map_err(&err)?;
                }
                "buffers" => {
                    wl.buffers = Some(Buffers::preset(value).ok_or_else(|| {
                        err(format!("unknown buffer preset '{value}' (small, medium, large)"))
                    })?)
                }
                "ifmap_buffer" => parts[0] = Some(num(value)?),
                "weight_buffer" => parts[1] = Some(num(value)?),
                "psum_buffer" => parts[2] = Some(num(value)?),
                "dataflow" => wl.dataflow = value.parse().map_err(err)?,
                "array" => {
                    let (r, c) = value
                        .split_once('x')
                        .ok_or_else(|| err(format!("array must be RxC, got '{value}'")))?;
                    wl.rows = num(r.trim())? as usize;
                    wl.cols = num(c.trim())? as usize;
                }
                "clock_mhz" => {
                    wl.clock_mhz = value
                        .parse()
                        .map_err(|_| err(format!("clock_mhz must be a number, got '{value}'")))?
                }
                _ => return Err(err(format!("unknown key '{key}'"))),
            }
        }
        match parts {
            [None, None, None] => {}
            [Some(ifmap), Some(weight), Some(psum)] => {
                wl.buffers = Some(Buffers { ifmap, weight, psum });
            }
            _ => {
                return Err(SystolicError::Parse {
                    line: 0,
                    msg: "ifmap_buffer, weight_buffer and psum_buffer must be given together".into(),
                })
            }
        }
        Ok(wl)
    }

    pub fn shapes(&self) -> Vec<ConvShape> {
        self.layers.iter().map(|l| l.shape).collect()
    }
}

fn parse_layer(rest: &str) -> Result<Layer, String> {
    let mut it = rest.split_whitespace();
    let name = it.next().ok_or("layer needs a name")?.to_string();
    let mut vals: [Option<u64>; 7] = [None; 7];
    const KEYS: [&str; 7] = ["H", "W", "Cin", "Cout", "K", "stride", "pad"];
    for kv in it {
        let (k, v) = kv.split_once('=').ok_or(format!("expected key=value, got '{kv}'"))?;
        let slot = KEYS
            .iter()
            .position(|x| *x == k)
            .ok_or(format!("unknown layer field '{k}'"))?;
        vals[slot] = Some(v.parse().map_err(|_| format!("{k} needs an integer, got '{v}'"))?);
    }
    let get = |i: usize, default: Option<u64>| vals[i].or(default).ok_or(format!("layer {name} is missing {}", KEYS[i]));
    let shape = ConvShape::new(
        get(0, None)?,
        get(1, None)?,
        get(2, None)?,
        get(3, None)?,
        get(4, None)?,
        get(5, Some(1))?,
        get(6, Some(0))?,
    )
    .map_err(|e| format!("layer {name}: {e}"))?;
    Ok(Layer { name, shape })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDma {
    pub name: String,
    #[serde(flatten)]
    pub report: DmaReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadDma {
    pub workload: String,
    pub buffers: Buffers,
    pub dataflow: Dataflow,
    pub layers: Vec<LayerDma>,
    pub naive: DmaCounter,
    pub scheduled: DmaCounter,
    pub ifmap_factor: f64,
    pub weight_factor: f64,
    pub cycles: u64,
}

/// Chooses a schedule per layer under `buffers` and sums the counters.
pub fn workload_dma(wl: &Workload, buffers: Buffers, cfg: &ArrayConfig) -> Result<WorkloadDma, SystolicError> {
    let mut layers = Vec::new();
    let (mut naive, mut scheduled, mut cycles) = (DmaCounter::default(), DmaCounter::default(), 0);
    for l in &wl.layers {
        let sched = TileSchedule::choose(&l.shape, buffers, cfg.dataflow)?;
        let report = dma_report(&l.shape, &sched, cfg)?;
        naive.add(&report.naive);
        scheduled.add(&report.measured.unwrap_or(report.analytic));
        cycles += report.cycles;
        layers.push(LayerDma {
            name: l.name.clone(),
            report,
        });
    }
    Ok(WorkloadDma {
        workload: wl.name.clone(),
        buffers,
        dataflow: cfg.dataflow,
        layers,
        naive,
        scheduled,
        ifmap_factor: ratio(naive.ifmap_reads, scheduled.ifmap_reads),
        weight_factor: ratio(naive.weight_reads, scheduled.weight_reads),
        cycles,
    })
}

pub const DMA_CSV_HEADER: &str =
    "layer,H,W,Cin,Cout,K,stride,pad,naive_ifmap,naive_weight,ifmap_reads,weight_reads,psum_writes,psum_reads,ifmap_factor,weight_factor,cycles";

/// One summary row per layer plus a `total` row.
pub fn workload_dma_csv(r: &WorkloadDma) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let mut row = |name: &str, s: Option<&ConvShape>, naive: &DmaCounter, c: &DmaCounter, fi: f64, fw: f64, cyc: u64| {
        let dims = s.map_or(vec![String::new(); 7], |s| {
            [s.h, s.w, s.c_in, s.c_out, s.k, s.stride, s.pad].iter().map(u64::to_string).collect()
        });
        let mut rec = vec![name.to_string()];
        rec.extend(dims);
        rec.extend([naive.ifmap_reads, naive.weight_reads, c.ifmap_reads, c.weight_reads, c.psum_writes, c.psum_reads].iter().map(u64::to_string));
        rec.extend([format!("{fi:.6}"), format!("{fw:.6}"), cyc.to_string()]);
        w.write_record(&rec).expect("in-memory write");
    };
    for l in &r.layers {
        let rep = &l.report;
        row(&l.name, Some(&rep.shape), &rep.naive, &rep.measured.unwrap_or(rep.analytic), rep.ifmap_factor, rep.weight_factor, rep.cycles);
    }
    row("total", None, &r.naive, &r.scheduled, r.ifmap_factor, r.weight_factor, r.cycles);
    let body = String::from_utf8(w.into_inner().expect("flush")).expect("utf8");
    format!("{DMA_CSV_HEADER}\n{body}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::quantize;

    fn micro() -> ConvShape {
        ConvShape::new(4, 4, 1, 1, 3, 1, 0).unwrap()
    }

    fn huge() -> Buffers {
        Buffers {
            ifmap: 1 << 40,
            weight: 1 << 40,
            psum: 1 << 40,
        }
    }

    fn cfg(p: Precision) -> ArrayConfig {
        ArrayConfig::default_for(p).unwrap()
    }

    #[test]
    fn micro_layer_full_residency() {
        let s = micro();
        let sched = TileSchedule::choose(&s, huge(), Dataflow::WeightStationary).unwrap();
        assert_eq!(sched.tiles, Tiles::full(&s));
        let r = dma_report(&s, &sched, &cfg(Precision::FxP8)).unwrap();
        assert_eq!(r.naive.weight_reads, 36);
        assert_eq!(r.naive.ifmap_reads, 36);
        assert_eq!(r.analytic.weight_reads, 9);
        assert_eq!(r.analytic.ifmap_reads, 16);
        assert_eq!(r.weight_factor, 4.0);
        assert_eq!(r.ifmap_factor, 2.25);
        assert_eq!(r.measured, Some(r.analytic));
    }

    #[test]
    fn unit_buffers() {
        let s = micro();
        let ones = Buffers {
            ifmap: 1,
            weight: 1,
            psum: 1,
        };
        let os = TileSchedule::choose(&s, ones, Dataflow::OutputStationary).unwrap();
        assert_eq!(os.tiles, Tiles::UNIT);
        let r = dma_report(&s, &os, &cfg(Precision::FxP8)).unwrap();
        assert_eq!((r.weight_factor, r.ifmap_factor), (1.0, 1.0));
        // weight-stationary still reuses the pinned weight across outputs
        let ws = TileSchedule::choose(&s, ones, Dataflow::WeightStationary).unwrap();
        let r = dma_report(&s, &ws, &cfg(Precision::FxP8)).unwrap();
        assert_eq!(r.weight_factor, 4.0);
        assert!(TileSchedule::choose(&s, Buffers { psum: 0, ..ones }, Dataflow::WeightStationary).is_err());
    }

    #[test]
    fn walk_matches_closed_form_on_padded_strided_layers() {
        for (shape, b) in [
            (ConvShape::new(9, 7, 3, 5, 3, 2, 1).unwrap(), Buffers { ifmap: 20, weight: 12, psum: 6 }),
            (ConvShape::new(8, 8, 4, 4, 3, 1, 1).unwrap(), Buffers { ifmap: 64, weight: 40, psum: 16 }),
            (ConvShape::new(6, 6, 2, 3, 1, 3, 0).unwrap(), Buffers { ifmap: 3, weight: 2, psum: 2 }),
        ] {
            for df in [Dataflow::WeightStationary, Dataflow::OutputStationary] {
                let sched = TileSchedule::choose(&shape, b, df).unwrap();
                assert_eq!(dma_walk(&shape, &sched), dma_counts(&shape, &sched), "{shape} {df:?} {sched:?}");
            }
        }
    }

    #[test]
    fn halo_counts_match_brute_force() {
        let s = ConvShape::new(7, 5, 1, 1, 3, 2, 1).unwrap();
        let t = Tiles { oh: 2, kh: 2, ow: 1, kw: 3, ..Tiles::UNIT };
        let halo = Halo::new(&s, &t);
        for (ot, row) in halo.rows.iter().enumerate() {
            for (kt, &n) in row.iter().enumerate() {
                let mut set = HashSet::new();
                for o in ot as u64 * 2..((ot as u64 + 1) * 2).min(s.out_h()) {
                    for k in kt as u64 * 2..((kt as u64 + 1) * 2).min(3) {
                        let i = (o * 2 + k) as i64 - 1;
                        if (0..7).contains(&i) {
                            set.insert(i);
                        }
                    }
                }
                assert_eq!(n, set.len() as u64);
            }
        }
    }

    #[test]
    fn gemm_1x1() {
        let c = cfg(Precision::FxP16);
        let f = Precision::FxP16.mac_format();
        let a = Matrix::from_f64(1, 1, f, &[1.5]).unwrap();
        let b = Matrix::from_f64(1, 1, f, &[-2.0]).unwrap();
        let sched = TileSchedule::choose(&ConvShape::gemm(1, 1, 1).unwrap(), huge(), Dataflow::WeightStationary).unwrap();
        let run = run_gemm(&a, &b, &c, &sched).unwrap();
        let want = lr_mac(a.get(0, 0), b.get(0, 0), Fxp::zero(f), c.pe.plan.linear_stages).unwrap();
        assert_eq!(run.c.get(0, 0), want);
        assert_eq!(run.cycles, gemm_cycles(1, 1, 1, &c));
    }

    #[test]
    fn identity_times_m() {
        // the default 5-stage MAC resolves weights to odd multiples of 1/4;
        // 1 LSB needs the full stage count
        let plan = crate::cordic::StagePlan::new(16, 16, 16).unwrap();
        let pe = PeConfig::new(Precision::FxP16, AfSelect::Relu, crate::pe::CtrlOp::Mac, crate::pe::ExecMode::Pipelined, plan, false).unwrap();
        let c = ArrayConfig::new(8, 8, pe).unwrap();
        let f = Precision::FxP16.mac_format();
        let eye = Matrix::from_fn(8, 8, f, |i, j| quantize(if i == j { 1.0 } else { 0.0 }, f)).unwrap();
        let m = Matrix::from_fn(8, 8, f, |i, j| quantize(((i * 8 + j) as f64 * 0.37).sin() * 3.0, f)).unwrap();
        let (out, _) = systolic_gemm(&eye, &m, &c).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert!((out.get(i, j).raw() - m.get(i, j).raw()).abs() <= 1);
            }
        }
    }

    #[test]
    fn stepped_cycles_match_closed_form() {
        for (p, (m, k, n), rc) in [
            (Precision::FxP8, (19, 13, 11), (8, 8)),
            (Precision::FxP32, (5, 3, 9), (4, 2)),
            (Precision::FxP4, (33, 8, 8), (8, 8)),
        ] {
            let mut c = cfg(p);
            (c.rows, c.cols) = rc;
            let f = p.mac_format();
            let a = Matrix::from_fn(m, k, f, |i, j| quantize(((i + 2 * j) % 5) as f64 * 0.1, f)).unwrap();
            let b = Matrix::from_fn(k, n, f, |i, j| quantize(((3 * i + j) % 7) as f64 * 0.2 - 0.6, f)).unwrap();
            let (out, cycles) = systolic_gemm(&a, &b, &c).unwrap();
            assert_eq!(cycles, gemm_cycles(m, k, n, &c));
            assert_eq!(out, direct_gemm(&a, &b, c.pe.plan.linear_stages).unwrap());
        }
    }

    #[test]
    fn gemm_shape_mismatch() {
        let f = Precision::FxP8.mac_format();
        let a = Matrix::zeros(2, 3, f);
        let b = Matrix::zeros(2, 3, f);
        assert!(matches!(direct_gemm(&a, &b, 5), Err(SystolicError::Shape(_))));
    }

    #[test]
    fn tile_too_big_for_buffer() {
        let s = micro();
        let err = TileSchedule::new(
            Dataflow::WeightStationary.loop_order(),
            Tiles::full(&s),
            Buffers { ifmap: 16, weight: 8, psum: 4 },
            &s,
        )
        .unwrap_err();
        assert!(matches!(err, SystolicError::Buffer { operand: "weight", need: 9, capacity: 8 }));
    }

    #[test]
    fn throughput_examples() {
        let t = throughput_report(&cfg(Precision::FxP8), &[], 200.0);
        assert_eq!(t.ops_per_cycle, 512.0);
        assert_eq!(t.gops, 102.4);
        let mut one = cfg(Precision::FxP32);
        (one.rows, one.cols) = (1, 1);
        assert_eq!(throughput_report(&one, &[], 1.0).ops_per_cycle, 1.0);
        assert_eq!(throughput_report(&cfg(Precision::FxP4), &[], 1.0).ops_per_cycle, 1024.0);
    }

    #[test]
    fn workload_parsing() {
        let wl = Workload::parse(
            "name = t\nprecision = 16\nbuffers = small # preset\narray = 4x2\n\nlayer a H=8 W=8 Cin=3 Cout=4 K=3 pad=1\n",
        )
        .unwrap();
        assert_eq!(wl.precision, Precision::FxP16);
        assert_eq!((wl.rows, wl.cols), (4, 2));
        assert_eq!(wl.buffers, Buffers::preset("small"));
        assert_eq!(wl.layers[0].shape, ConvShape::new(8, 8, 3, 4, 3, 1, 1).unwrap());
        let e = Workload::parse("layer b H=8 W=8 Cin=3 K=3\n").unwrap_err();
        assert!(e.to_string().contains("line 1") && e.to_string().contains("Cout"), "{e}");
        assert!(Workload::parse("bogus = 1").is_err());
        assert!(Workload::parse("ifmap_buffer = 4").is_err());
    }
}
