//! Subcommands behind the `flexpe` binary. Every command renders a report
//! that embeds its manifest (tool, version, resolved arguments, input
//! digests); `replay` rebuilds the command from that manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use flexpe_core::container::sha256_hex;
use flexpe_core::cordic::{angle_table_csv, AngleKind, StagePlan, HR_RANGE};
use flexpe_core::fixedpoint::{quantize, QFormat};
use flexpe_core::fixtures;
use flexpe_core::harness::{pareto_sweep, reports_csv, select_plan, uniform_vec, Function, SweepAxis};
use flexpe_core::nn::{load_dataset, load_model, run_inference, Dataset, ModelSpec};
use flexpe_core::pe::{af_curve, AfSelect, PeConfig, Precision};
use flexpe_core::systolic::{
    direct_gemm, gemm_cycles, run_gemm, throughput_report, workload_dma, workload_dma_csv, ArrayConfig, Buffers, ConvShape,
    Dataflow, Matrix, TileSchedule, Workload,
};
use flexpe_core::trace::{compare_trace, TraceTable};

pub const TOOL: &str = "flexpe";
pub const OUT_DIR_ENV: &str = "FLEXPE_OUT_DIR";

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONSTRAINT: u8 = 3;
pub const EXIT_GATE: u8 = 4;

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_USAGE, error: e.into() }
    }

    pub fn constraint(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_CONSTRAINT, error: e.into() }
    }

    pub fn gate(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_GATE, error: e.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "flexpe", version, about = "CORDIC SIMD processing element emulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "subcommand", content = "params", rename_all = "lowercase")]
pub enum Command {
    /// Activation-function curve as CSV.
    Af(AfArgs),
    /// Golden CORDIC trace with per-row deltas; exits 4 past 2 LSB.
    Trace(TraceArgs),
    /// Monte-Carlo error sweep over stage counts.
    Sweep(SweepArgs),
    /// Random GEMM on the systolic array, checked against the direct product.
    Gemm(GemmArgs),
    /// DMA reuse report for a workload file.
    Dma(DmaArgs),
    /// Quantized inference accuracy against the real-arithmetic reference.
    Infer(InferArgs),
    /// Quantized CORDIC angle tables.
    Angles(AnglesArgs),
    /// Regenerate a report from its embedded manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PlanArgs {
    /// Hyperbolic stages (default: the precision's plan).
    #[arg(long)]
    pub hyp: Option<u32>,
    /// Linear stages (default: the precision's plan).
    #[arg(long)]
    pub lin: Option<u32>,
}

impl PlanArgs {
    fn resolve(&mut self, p: Precision) -> CliResult<StagePlan> {
        let d = p.default_plan();
        let h = *self.hyp.get_or_insert(d.hyperbolic_stages);
        let l = *self.lin.get_or_insert(d.linear_stages);
        StagePlan::new(h, l, d.precision).map_err(CliError::constraint)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AfArgs {
    #[arg(long = "fn")]
    pub function: AfSelect,
    #[arg(long, default_value = "16")]
    pub precision: Precision,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[arg(long, allow_hyphen_values = true, default_value_t = -HR_RANGE)]
    pub from: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = HR_RANGE)]
    pub to: f64,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableArg {
    Hyp,
    Div,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TraceArgs {
    #[arg(long, value_enum)]
    pub table: TableArg,
    #[arg(long, default_value = "16")]
    pub precision: Precision,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long = "fn")]
    pub function: Function,
    #[arg(long, default_value = "8")]
    pub precision: Precision,
    /// Inclusive stage range LO:HI (default 1:N).
    #[arg(long)]
    pub stages: Option<String>,
    /// Which stage count varies: hyp, lin or both.
    #[arg(long, default_value = "both")]
    pub axis: SweepAxis,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also pick the knee plan per axis and compare it with the default.
    #[arg(long)]
    pub knee: bool,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GemmArgs {
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value = "16")]
    pub precision: Precision,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[arg(long, default_value_t = 8)]
    pub rows: usize,
    #[arg(long, default_value_t = 8)]
    pub cols: usize,
    #[arg(long, default_value = "ws")]
    pub dataflow: Dataflow,
    /// Buffer preset (small, medium, large) or IFMAPxWEIGHTxPSUM elements.
    #[arg(long, default_value = "small")]
    pub buffers: String,
    /// A entries are drawn from U[-a, a).
    #[arg(long, default_value_t = 0.12)]
    pub a_range: f64,
    /// B entries (the MAC multiplier) are drawn from U[-b, b).
    #[arg(long, default_value_t = 4.0)]
    pub b_range: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DmaArgs {
    /// Workload file, or `micro` for the built-in 4x4 / 3x3 layer.
    #[arg(long)]
    pub workload: String,
    /// Overrides the workload's buffers: preset name or IFMAPxWEIGHTxPSUM.
    #[arg(long)]
    pub buffers: Option<String>,
    #[arg(long)]
    pub dataflow: Option<Dataflow>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct InferArgs {
    /// `fixture` (the MLP), `mlp`, `cnn`, or a model file.
    #[arg(long, default_value = "fixture")]
    pub model: String,
    /// `fixture` for the shipped held-out set, or a dataset file.
    #[arg(long, default_value = "fixture")]
    pub data: String,
    #[arg(long, default_value = "16")]
    pub precision: Precision,
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Use only the first N samples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleArg {
    Hyp,
    Lin,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AnglesArgs {
    #[arg(long, value_enum, default_value = "hyp")]
    pub kind: AngleArg,
    /// First stage index (default 1 for hyp, -2 for lin).
    #[arg(long, allow_hyphen_values = true)]
    pub first: Option<i32>,
    #[arg(long, default_value_t = 16)]
    pub stages: u32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    pub report: PathBuf,
    /// Compare byte-for-byte with the file instead of printing; exits 4 on mismatch.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    #[serde(flatten)]
    pub command: Value,
    /// sha256 of every input file read.
    pub inputs: BTreeMap<String, String>,
}

/// A rendered report plus an optional gate failure to exit with after writing it.
#[derive(Debug)]
pub struct Outcome {
    pub text: String,
    pub out: Option<PathBuf>,
    pub gate: Option<String>,
}

const MICRO_WORKLOAD: &str = "name = micro\nbuffers = large\nlayer micro H=4 W=4 Cin=1 Cout=1 K=3 stride=1 pad=0\n";

fn read_input(path: &str, inputs: &mut BTreeMap<String, String>) -> CliResult<Vec<u8>> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read '{path}'")).map_err(CliError::usage)?;
    inputs.insert(path.to_string(), sha256_hex(&bytes));
    Ok(bytes)
}

fn parse_buffers(s: &str) -> CliResult<Buffers> {
    if let Some(b) = Buffers::preset(s) {
        return Ok(b);
    }
    let parts: Vec<u64> = s.split('x').filter_map(|v| v.parse().ok()).collect();
    match parts[..] {
        [ifmap, weight, psum] if s.split('x').count() == 3 => Ok(Buffers { ifmap, weight, psum }),
        _ => Err(CliError::usage(anyhow!("buffers must be small, medium, large or IFMAPxWEIGHTxPSUM, got '{s}'"))),
    }
}

fn parse_range(s: &str) -> CliResult<(u32, u32)> {
    let bad = || CliError::usage(anyhow!("stage range must be LO:HI, got '{s}'"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let (lo, hi) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn uniform_only(p: Precision, what: &str) -> CliResult<()> {
    if Precision::UNIFORM.contains(&p) {
        Ok(())
    } else {
        Err(CliError::constraint(anyhow!("{what} runs uniform precisions only (4, 8, 16, 32), got {p}")))
    }
}

/// Fills defaults that depend on the environment so the manifest records
/// the resolved values.
fn resolve_out(out: &mut Option<PathBuf>, default_name: &str) {
    if out.is_none() {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            *out = Some(Path::new(&dir).join(default_name));
        }
    }
}

fn with_manifest_csv(manifest: &Manifest, body: &str) -> String {
    let v = serde_json::to_value(manifest).expect("manifest json");
    format!("# manifest {v}\n{body}")
}

fn with_manifest_json(manifest: &Manifest, mut body: Value) -> String {
    let obj = body.as_object_mut().expect("report is an object");
    obj.insert("manifest".into(), serde_json::to_value(manifest).expect("manifest json"));
    serde_json::to_string_pretty(&body).expect("report json") + "\n"
}

fn manifest(cmd: &Command, inputs: BTreeMap<String, String>) -> Manifest {
    Manifest {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: serde_json::to_value(cmd).expect("command json"),
        inputs,
    }
}

/// Runs a (non-replay) command and renders its report.
pub fn execute(cmd: Command) -> CliResult<Outcome> {
    match cmd {
        Command::Af(a) => run_af(a),
        Command::Trace(a) => run_trace(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Gemm(a) => run_gemm_cmd(a),
        Command::Dma(a) => run_dma(a),
        Command::Infer(a) => run_infer(a),
        Command::Angles(a) => run_angles(a),
        Command::Replay(_) => Err(CliError::usage(anyhow!("replay cannot be nested"))),
    }
}

fn run_af(mut a: AfArgs) -> CliResult<Outcome> {
    let plan = a.plan.resolve(a.precision)?;
    PeConfig::af(a.precision, a.function).map_err(CliError::constraint)?;
    if a.points == 0 || a.from.partial_cmp(&a.to) != Some(std::cmp::Ordering::Less) {
        return Err(CliError::usage(anyhow!("need --points > 0 and --from < --to")));
    }
    resolve_out(&mut a.out, &format!("af-{}-{}.csv", a.function.name(), a.precision));
    let pts = af_curve(a.function, a.precision, &plan, a.from, a.to, a.points).map_err(CliError::constraint)?;
    let mut body = String::from("input,output,raw\n");
    for p in &pts {
        let _ = writeln!(body, "{},{},{}", p.input, p.output, p.raw);
    }
    let out = a.out.clone();
    let m = manifest(&Command::Af(a), BTreeMap::new());
    Ok(Outcome { text: with_manifest_csv(&m, &body), out, gate: None })
}

fn run_trace(mut a: TraceArgs) -> CliResult<Outcome> {
    uniform_only(a.precision, "trace")?;
    let table = match a.table {
        TableArg::Hyp => TraceTable::Hyp,
        TableArg::Div => TraceTable::Div,
    };
    let format = QFormat::af_datapath(a.precision.bits()).map_err(CliError::constraint)?;
    let c = compare_trace(table, format).map_err(CliError::constraint)?;
    resolve_out(&mut a.out, &format!("trace-{}-{}.csv", table_name(a.table), a.precision));
    let mut body = String::from(
        "stage,d_expected,d,x_expected,x,x_delta_lsb,y_expected,y,y_delta_lsb,z_printed,z_expected,z,z_delta_lsb,pass\n",
    );
    for r in &c.rows {
        let _ = writeln!(
            body,
            "{},{},{},{},{:.6},{:.3},{},{:.6},{:.3},{},{:.6},{:.6},{:.3},{}",
            r.stage,
            r.d_expected,
            r.d,
            r.x.expected,
            r.x.got,
            r.x.delta_lsb,
            r.y.expected,
            r.y.got,
            r.y.delta_lsb,
            r.z_printed,
            r.z.expected,
            r.z.got,
            r.z.delta_lsb,
            r.passes()
        );
    }
    let gate = (!c.passes()).then(|| {
        let worst = c.rows.iter().filter(|r| !r.passes()).map(|r| r.stage.to_string()).collect::<Vec<_>>();
        format!(
            "{} trace at {} exceeds {} LSB on row(s) {} (worst {:.2} LSB)",
            table_name(a.table),
            a.precision,
            c.tolerance_lsb,
            worst.join(", "),
            c.worst_lsb()
        )
    });
    let out = a.out.clone();
    let m = manifest(&Command::Trace(a), BTreeMap::new());
    Ok(Outcome { text: with_manifest_csv(&m, &body), out, gate })
}

fn table_name(t: TableArg) -> &'static str {
    match t {
        TableArg::Hyp => "hyp",
        TableArg::Div => "div",
    }
}

fn run_sweep(mut a: SweepArgs) -> CliResult<Outcome> {
    uniform_only(a.precision, "sweep")?;
    let bits = a.precision.bits();
    let (lo, hi) = parse_range(a.stages.get_or_insert_with(|| format!("1:{bits}")))?;
    let format = *a.format.get_or_insert(Format::Csv);
    resolve_out(
        &mut a.out,
        &format!("sweep-{}-{}.{}", a.function, a.precision, if format == Format::Csv { "csv" } else { "json" }),
    );
    let reports = pareto_sweep(a.function, a.precision, lo..=hi, a.axis, a.seed).map_err(CliError::constraint)?;
    let knee = if a.knee {
        Some(select_plan(a.function, a.precision, a.seed).map_err(CliError::constraint)?)
    } else {
        None
    };
    let out = a.out.clone();
    let m = manifest(&Command::Sweep(a), BTreeMap::new());
    let text = match format {
        Format::Csv => {
            let mut body = reports_csv(&reports);
            if let Some(k) = &knee {
                // knee rows trail the table as comments so the CSV stays rectangular
                let _ = writeln!(
                    body,
                    "# knee selected={}/{} default={}/{} agrees={}",
                    k.selected.hyperbolic_stages,
                    k.selected.linear_stages,
                    k.default.hyperbolic_stages,
                    k.default.linear_stages,
                    k.agrees
                );
            }
            with_manifest_csv(&m, &body)
        }
        Format::Json => with_manifest_json(&m, json!({ "records": reports, "knee": knee })),
    };
    Ok(Outcome { text, out, gate: None })
}

fn run_gemm_cmd(mut a: GemmArgs) -> CliResult<Outcome> {
    uniform_only(a.precision, "gemm")?;
    let plan = a.plan.resolve(a.precision)?;
    if a.m == 0 || a.k == 0 || a.n == 0 {
        return Err(CliError::usage(anyhow!("matrix dimensions must be positive")));
    }
    let buffers = parse_buffers(&a.buffers)?;
    resolve_out(&mut a.out, &format!("gemm-{}x{}x{}-{}.json", a.m, a.k, a.n, a.precision));
    let pe = PeConfig { plan, ..PeConfig::mac(a.precision).map_err(CliError::constraint)? };
    let mut cfg = ArrayConfig::new(a.rows, a.cols, pe).map_err(CliError::constraint)?;
    cfg.dataflow = a.dataflow;
    let f = a.precision.mac_format();
    let av = uniform_vec(a.seed, a.m * a.k, -a.a_range, a.a_range);
    let bv = uniform_vec(a.seed.wrapping_add(1), a.k * a.n, -a.b_range, a.b_range);
    let am = Matrix::from_fn(a.m, a.k, f, |i, j| quantize(av[i * a.k + j], f)).map_err(CliError::constraint)?;
    let bm = Matrix::from_fn(a.k, a.n, f, |i, j| quantize(bv[i * a.n + j], f)).map_err(CliError::constraint)?;
    let shape = ConvShape::gemm(a.m as u64, a.k as u64, a.n as u64).map_err(CliError::constraint)?;
    let sched = TileSchedule::choose(&shape, buffers, a.dataflow).map_err(CliError::constraint)?;
    let run = run_gemm(&am, &bm, &cfg, &sched).map_err(CliError::constraint)?;
    let direct = direct_gemm(&am, &bm, plan.linear_stages).map_err(CliError::constraint)?;
    let raws: Vec<i64> = run.c.data().iter().map(|v| v.raw()).collect();
    let bit_identical = run.c == direct;
    let raw_bytes: Vec<u8> = raws.iter().flat_map(|r| r.to_le_bytes()).collect();
    let body = json!({
        "shape": { "m": a.m, "k": a.k, "n": a.n },
        "format": f.to_string(),
        "cycles": run.cycles,
        "closed_form_cycles": gemm_cycles(a.m, a.k, a.n, &cfg),
        "bit_identical_to_direct": bit_identical,
        "c_sha256": sha256_hex(&raw_bytes),
        "c_raw": if raws.len() <= 1024 { json!(raws) } else { Value::Null },
        "schedule": sched,
        "dma": run.counters,
    });
    let out = a.out.clone();
    let gate = (!bit_identical).then(|| "array result differs from the direct product".to_string());
    let m = manifest(&Command::Gemm(a), BTreeMap::new());
    Ok(Outcome { text: with_manifest_json(&m, body), out, gate })
}

fn run_dma(mut a: DmaArgs) -> CliResult<Outcome> {
    let mut inputs = BTreeMap::new();
    let text = if a.workload == "micro" {
        MICRO_WORKLOAD.to_string()
    } else {
        let bytes = read_input(&a.workload, &mut inputs)?;
        String::from_utf8(bytes).map_err(|_| CliError::usage(anyhow!("'{}' is not UTF-8", a.workload)))?
    };
    let wl = Workload::parse(&text).with_context(|| format!("workload '{}'", a.workload)).map_err(CliError::usage)?;
    uniform_only(wl.precision, "the array")?;
    let buffers = match &a.buffers {
        Some(s) => parse_buffers(s)?,
        None => wl.buffers.ok_or_else(|| CliError::usage(anyhow!("workload sets no buffers; pass --buffers")))?,
    };
    let dataflow = *a.dataflow.get_or_insert(wl.dataflow);
    let format = *a.format.get_or_insert(Format::Json);
    let stem = Path::new(&a.workload).file_stem().and_then(|s| s.to_str()).unwrap_or("workload").to_string();
    resolve_out(&mut a.out, &format!("dma-{stem}.{}", if format == Format::Csv { "csv" } else { "json" }));
    let mut cfg = ArrayConfig::new(wl.rows, wl.cols, PeConfig::mac(wl.precision).map_err(CliError::constraint)?)
        .map_err(CliError::constraint)?;
    cfg.dataflow = dataflow;
    let r = workload_dma(&wl, buffers, &cfg).map_err(CliError::constraint)?;
    let out = a.out.clone();
    let m = manifest(&Command::Dma(a), inputs);
    let text = match format {
        Format::Csv => with_manifest_csv(&m, &workload_dma_csv(&r)),
        Format::Json => {
            let tp = throughput_report(&cfg, &wl.shapes(), wl.clock_mhz);
            let mut v = serde_json::to_value(&r).expect("dma json");
            v.as_object_mut().expect("object").insert("throughput".into(), serde_json::to_value(tp).expect("json"));
            with_manifest_json(&m, v)
        }
    };
    Ok(Outcome { text, out, gate: None })
}

fn load_model_arg(name: &str, inputs: &mut BTreeMap<String, String>) -> CliResult<ModelSpec> {
    match fixtures::model(name) {
        Some(m) => m.map_err(CliError::usage),
        None => {
            let bytes = read_input(name, inputs)?;
            load_model(&bytes).with_context(|| format!("model '{name}'")).map_err(CliError::usage)
        }
    }
}

fn load_data_arg(name: &str, inputs: &mut BTreeMap<String, String>) -> CliResult<Dataset> {
    if name == "fixture" {
        return fixtures::test_set().map_err(CliError::usage);
    }
    let bytes = read_input(name, inputs)?;
    load_dataset(&bytes).with_context(|| format!("dataset '{name}'")).map_err(CliError::usage)
}

fn run_infer(mut a: InferArgs) -> CliResult<Outcome> {
    uniform_only(a.precision, "infer")?;
    let plan = a.plan.resolve(a.precision)?;
    let mut inputs = BTreeMap::new();
    let model = load_model_arg(&a.model, &mut inputs)?;
    let mut data = load_data_arg(&a.data, &mut inputs)?;
    if let Some(n) = a.samples {
        data = data.head(n);
    }
    let stem = Path::new(&a.model).file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    resolve_out(&mut a.out, &format!("infer-{stem}-{}.json", a.precision));
    let r = run_inference(&model, &data, a.precision, &plan).map_err(CliError::constraint)?;
    let mut v = serde_json::to_value(&r).expect("report json");
    let obj = v.as_object_mut().expect("object");
    obj.insert("model".into(), json!(model.name));
    obj.insert("dataset".into(), json!(data.name));
    let out = a.out.clone();
    let m = manifest(&Command::Infer(a), inputs);
    Ok(Outcome { text: with_manifest_json(&m, v), out, gate: None })
}

fn run_angles(mut a: AnglesArgs) -> CliResult<Outcome> {
    let (kind, default_first) = match a.kind {
        AngleArg::Hyp => (AngleKind::Hyperbolic, 1),
        AngleArg::Lin => (AngleKind::Linear, -2),
    };
    let first = *a.first.get_or_insert(default_first);
    if kind == AngleKind::Hyperbolic && first < 1 {
        return Err(CliError::constraint(anyhow!("hyperbolic stages start at 1")));
    }
    resolve_out(&mut a.out, &format!("angles-{}.csv", if kind == AngleKind::Hyperbolic { "hyp" } else { "lin" }));
    let formats: Vec<QFormat> = [8, 16, 32].iter().map(|&b| QFormat::af_datapath(b).expect("af format")).collect();
    let body = angle_table_csv(kind, first, a.stages, &formats);
    let out = a.out.clone();
    let m = manifest(&Command::Angles(a), BTreeMap::new());
    Ok(Outcome { text: with_manifest_csv(&m, &body), out, gate: None })
}

/// Extracts the manifest of a CSV or JSON report.
pub fn read_manifest(text: &str) -> CliResult<Manifest> {
    let bad = |e: &dyn std::fmt::Display| CliError::usage(anyhow!("no readable manifest: {e}"));
    let value: Value = match text.lines().next().and_then(|l| l.strip_prefix("# manifest ")) {
        Some(j) => serde_json::from_str(j).map_err(|e| bad(&e))?,
        None => {
            let mut v: Value = serde_json::from_str(text).map_err(|e| bad(&e))?;
            v.get_mut("manifest").map(Value::take).ok_or_else(|| bad(&"report has no manifest"))?
        }
    };
    serde_json::from_value(value).map_err(|e| bad(&e))
}

/// Rebuilds and re-runs the command recorded in a manifest.
pub fn replay(manifest: &Manifest) -> CliResult<Outcome> {
    if manifest.tool != TOOL {
        return Err(CliError::usage(anyhow!("manifest is from '{}', not {TOOL}", manifest.tool)));
    }
    let cmd: Command = serde_json::from_value(manifest.command.clone())
        .map_err(|e| CliError::usage(anyhow!("manifest command: {e}")))?;
    execute(cmd)
}

pub fn run_replay(a: &ReplayArgs) -> CliResult<Outcome> {
    let text = std::fs::read_to_string(&a.report)
        .with_context(|| format!("cannot read '{}'", a.report.display()))
        .map_err(CliError::usage)?;
    let m = read_manifest(&text)?;
    let mut again = replay(&m)?;
    again.out = None;
    if a.check {
        if again.text == text {
            again.text = format!("{}: identical\n", a.report.display());
        } else {
            let line = text.lines().zip(again.text.lines()).position(|(x, y)| x != y).map_or_else(
                || "length".to_string(),
                |i| format!("line {}", i + 1),
            );
            return Err(CliError::gate(anyhow!("{}: regenerated report differs ({line})", a.report.display())));
        }
    }
    Ok(again)
}

/// Writes the report to its output path or stdout.
pub fn emit(o: &Outcome) -> CliResult<()> {
    match &o.out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("cannot create '{}'", dir.display())).map_err(CliError::usage)?;
            }
            std::fs::write(p, &o.text).with_context(|| format!("cannot write '{}'", p.display())).map_err(CliError::usage)?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{}", o.text),
    }
    Ok(())
}
