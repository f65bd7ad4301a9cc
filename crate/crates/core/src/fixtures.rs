//! Shipped glyph-classification fixtures: an 8x8, 10-class held-out set,
//! a 64-32-10 MLP and a small conv model. Regenerate with
//! `tools/make_fixture.py`.

use crate::nn::{load_dataset, load_model, Dataset, ModelSpec, NnError};

pub const MLP: &[u8] = include_bytes!("../fixtures/glyph-mlp.fpm");
pub const CNN: &[u8] = include_bytes!("../fixtures/glyph-cnn.fpm");
pub const TEST_SET: &[u8] = include_bytes!("../fixtures/glyph-test.fpd");

pub const MLP_DIGEST: &str = "b63dbe9b8c54be8dfaea4992b7109741ff1c4af9a9decb5bcc891e9f5ae14276";
pub const CNN_DIGEST: &str = "fcdc719e6b1b1a74e1cfe7891866f97ed4286a40a963af248f40e6426bfe2898";
pub const TEST_SET_DIGEST: &str = "41e59cf0da23694ca222b1492ad54f6069a196bef3a87a17fb0d20a5d88d1824";

/// Names accepted by [`model`].
pub const MODELS: [&str; 3] = ["fixture", "mlp", "cnn"];

/// `fixture` and `mlp` are the MLP.
pub fn model(name: &str) -> Option<Result<ModelSpec, NnError>> {
    match name {
        "fixture" | "mlp" => Some(load_model(MLP)),
        "cnn" => Some(load_model(CNN)),
        _ => None,
    }
}

pub fn test_set() -> Result<Dataset, NnError> {
    load_dataset(TEST_SET)
}
