//! Browser bindings for the soft pivot bridge: re-normalization, probability
//! correction and a toy beam search that exposes inconsistent positions.

pub mod demo;

use wasm_bindgen::prelude::*;

use softpivot::softbridge::{self, CorrectionMode};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Raise `weights` (scaled to sum to one) to the power `alpha` and re-normalize.
#[wasm_bindgen]
pub fn renormalize(weights: &[f64], alpha: f64) -> Result<Vec<f64>, JsError> {
    demo::renormalize_weights(weights, alpha).map_err(js_err)
}

/// Apply a correction (`none`, `eq1`, `add1`, `add05`, `exc`) to one row.
#[wasm_bindgen(js_name = correctRow)]
pub fn correct_row(row: &[f64], generated: usize, mode: &str) -> Result<Vec<f64>, JsError> {
    let mode: CorrectionMode = mode.parse().map_err(js_err)?;
    if generated >= row.len() {
        return Err(js_err(format!("token {generated} outside a row of {}", row.len())));
    }
    Ok(softbridge::correct_row(row, generated, mode))
}

/// Index of the largest entry (lowest index on ties).
#[wasm_bindgen]
pub fn argmax(row: &[f64]) -> usize {
    softbridge::argmax(row)
}

/// Beam-decode a seeded toy model; returns the best hypothesis as JSON.
#[wasm_bindgen(js_name = beamDemo)]
pub fn beam_demo(
    vocab: usize,
    seed: u32,
    sharpness: f64,
    beam_size: usize,
    max_len: usize,
    mode: &str,
) -> Result<String, JsError> {
    let mode: CorrectionMode = mode.parse().map_err(js_err)?;
    let d = demo::beam_demo(vocab, seed as u64, sharpness, beam_size, max_len, mode).map_err(js_err)?;
    serde_json::to_string(&d).map_err(js_err)
}
