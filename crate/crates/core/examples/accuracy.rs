//! Prints the accuracy report of a model on a dataset at every precision.
//!
//! cargo run --release -p flexpe-core --example accuracy -- MODEL DATA

use flexpe_core::nn::{load_dataset, load_model, run_inference};
use flexpe_core::pe::Precision;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [model, data] = &args[..] else {
        eprintln!("usage: accuracy MODEL DATA");
        std::process::exit(2);
    };
    let m = load_model(&std::fs::read(model).expect("read model")).expect("parse model");
    let d = load_dataset(&std::fs::read(data).expect("read data")).expect("parse data");
    for p in [Precision::FxP4, Precision::FxP8, Precision::FxP16, Precision::FxP32] {
        match run_inference(&m, &d, p, &p.default_plan()) {
            Ok(r) => println!("{}", serde_json::to_string(&r).expect("json")),
            Err(e) => println!("{p}: {e}"),
        }
    }
}
