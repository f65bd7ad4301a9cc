//! Browser bindings. Each export returns a JSON string; errors come back as
//! JS exceptions carrying the library's message.

use serde_json::json;
use wasm_bindgen::prelude::*;

use flexpe_core::cordic::{hr_init, run_traced, CordicMode, StagePlan};
use flexpe_core::fixedpoint::quantize;
use flexpe_core::harness::{pareto_sweep, Function, SweepAxis};
use flexpe_core::pe::{af_curve, AfSelect, Precision};

fn parse<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn plan(p: Precision, hyp: u32, lin: u32) -> Result<StagePlan, String> {
    let d = p.default_plan();
    let h = if hyp == 0 { d.hyperbolic_stages } else { hyp };
    let l = if lin == 0 { d.linear_stages } else { lin };
    StagePlan::new(h, l, d.precision).map_err(|e| e.to_string())
}

/// AF curve over [from, to). Zero stage counts select the precision's plan.
pub fn curve_json(af: &str, precision: &str, hyp: u32, lin: u32, from: f64, to: f64, points: usize) -> Result<String, String> {
    let p: Precision = parse(precision)?;
    let af: AfSelect = parse(af)?;
    let plan = plan(p, hyp, lin)?;
    if points == 0 || points > 4096 || from.partial_cmp(&to) != Some(std::cmp::Ordering::Less) {
        return Err("need 0 < points <= 4096 and from < to".into());
    }
    let pts = af_curve(af, p, &plan, from, to, points).map_err(|e| e.to_string())?;
    let exact: Vec<f64> = pts
        .iter()
        .map(|c| match af {
            AfSelect::Sigmoid => 1.0 / (1.0 + (-c.input).exp()),
            AfSelect::Tanh => c.input.tanh(),
            AfSelect::Relu => c.input.max(0.0),
            AfSelect::Exp => c.input.exp(),
            AfSelect::Softmax => 1.0 / (1.0 + (-c.input).exp()),
        })
        .collect();
    Ok(json!({
        "input": pts.iter().map(|c| c.input).collect::<Vec<_>>(),
        "output": pts.iter().map(|c| c.output).collect::<Vec<_>>(),
        "exact": exact,
        "hyp_stages": plan.hyperbolic_stages,
        "lin_stages": plan.linear_stages,
    })
    .to_string())
}

/// Hyperbolic rotation trace from (1/Kh, 0, z).
pub fn hr_trace_json(z: f64, precision: &str, stages: u32) -> Result<String, String> {
    let p: Precision = parse(precision)?;
    if !(1..=32).contains(&stages) {
        return Err("stages must be 1..=32".into());
    }
    let init = hr_init(quantize(z, p.af_format())).map_err(|e| e.to_string())?;
    let (_, rows) = run_traced(&init, CordicMode::HR, stages).map_err(|e| e.to_string())?;
    let rows: Vec<_> = rows
        .iter()
        .map(|r| json!({ "stage": r.stage, "d": r.d, "x": r.x.to_f64(), "y": r.y.to_f64(), "z": r.z.to_f64() }))
        .collect();
    Ok(json!({ "z": init.z.to_f64(), "cosh": z.cosh(), "sinh": z.sinh(), "rows": rows }).to_string())
}

/// Monte-Carlo MAE for stage counts 1..=N, both axes together.
pub fn sweep_json(function: &str, precision: &str, seed: u64) -> Result<String, String> {
    let p: Precision = parse(precision)?;
    let f: Function = parse(function)?;
    if !Precision::UNIFORM.contains(&p) {
        return Err(format!("sweeps run uniform precisions only, got {p}"));
    }
    // FxP32 cells draw 2^17 samples each; cap the browser sweep at 16 stages.
    let hi = p.bits().min(16);
    let r = pareto_sweep(f, p, 1..=hi, SweepAxis::Both, seed).map_err(|e| e.to_string())?;
    Ok(json!({
        "stages": r.iter().map(|e| e.hyp_stages).collect::<Vec<_>>(),
        "mae": r.iter().map(|e| e.mae).collect::<Vec<_>>(),
        "max_abs_err": r.iter().map(|e| e.max_abs_err).collect::<Vec<_>>(),
        "samples": r.first().map_or(0, |e| e.samples),
        "lsb": p.af_format().lsb(),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn af_curve_js(af: &str, precision: &str, hyp: u32, lin: u32, from: f64, to: f64, points: usize) -> Result<String, JsError> {
    curve_json(af, precision, hyp, lin, from, to, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn hr_trace_js(z: f64, precision: &str, stages: u32) -> Result<String, JsError> {
    hr_trace_json(z, precision, stages).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn error_sweep_js(function: &str, precision: &str, seed: u64) -> Result<String, JsError> {
    sweep_json(function, precision, seed).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &str) -> serde_json::Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn curve_has_requested_points() {
        let c = v(&curve_json("sigmoid", "16", 0, 0, -1.0, 1.0, 64).unwrap());
        assert_eq!(c["output"].as_array().unwrap().len(), 64);
        assert_eq!((c["hyp_stages"].as_u64(), c["lin_stages"].as_u64()), (Some(4), Some(5)));
        assert!(curve_json("softmax", "4", 0, 0, -1.0, 1.0, 8).unwrap_err().contains("FxP4"));
        assert!(curve_json("sigmoid", "16", 0, 0, 1.0, -1.0, 8).is_err());
    }

    #[test]
    fn trace_matches_golden_last_row() {
        let t = v(&hr_trace_json(0.5, "16", 9).unwrap());
        let last = &t["rows"][8];
        assert!((last["x"].as_f64().unwrap() - 1.1297).abs() < 3e-4);
        assert!((last["y"].as_f64().unwrap() - 0.5218).abs() < 3e-4);
        assert!(hr_trace_json(0.5, "16", 0).is_err());
    }

    #[test]
    fn sweep_lengths() {
        let s = v(&sweep_json("tanh", "8", 1).unwrap());
        assert_eq!(s["mae"].as_array().unwrap().len(), 8);
        assert_eq!(s["samples"], 32);
        assert!(sweep_json("tanh", "h12", 1).is_err());
    }
}
