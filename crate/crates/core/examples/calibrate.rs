//! Calibrates a model on a dataset: per-layer weight gains chosen at the
//! given precision, then min-max input scales.
//!
//! cargo run --release -p flexpe-core --example calibrate -- MODEL DATA OUT [BITS]

use flexpe_core::nn::{calibrate_gains, load_dataset, load_model};
use flexpe_core::pe::Precision;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, data, out) = match &args[..] {
        [m, d, o] | [m, d, o, _] => (m, d, o),
        _ => {
            eprintln!("usage: calibrate MODEL DATA OUT [BITS]");
            std::process::exit(2);
        }
    };
    let p: Precision = args.get(3).map_or("8", String::as_str).parse().expect("precision");
    let mut m = load_model(&std::fs::read(model).expect("read model")).expect("parse model");
    let d = load_dataset(&std::fs::read(data).expect("read data")).expect("parse data");
    let err = calibrate_gains(&mut m, &d, p, &p.default_plan()).expect("calibrate");
    for l in &m.layers {
        println!("{:>8} in_scale={} w_gain={}", l.name, l.in_scale, l.w_gain);
    }
    println!("mean logit error at {p}: {err:.4}");
    std::fs::write(out, m.to_bytes()).expect("write model");
}
