//! Browser bindings for the demo page in `www/`.
//!
//! Each exported function is a thin wrapper over a plain Rust function that
//! returns `Result<_, String>`, so the logic is testable off the browser.

use serde::Serialize;
use spice_core::metrics::{ged, red, MetricMode};
use spice_core::objectives::{ortho_loss, EmbeddingBatch};
use spice_core::{execute, parse_context, parse_program, render_context, JaccardSimilarity, SceneGraph};
use wasm_bindgen::prelude::*;

fn context(text: &str) -> Result<SceneGraph, String> {
    parse_context(text.trim()).map_err(|e| format!("context: {e}"))
}

fn apply(program: &str, prior: &SceneGraph, what: &str) -> Result<SceneGraph, String> {
    let p = parse_program(program).map_err(|e| format!("{what}: {e}"))?;
    execute(&p, prior).map_err(|e| format!("{what}: {e}"))
}

/// Runs `program` against the rendered context and renders the result.
pub fn execute_text(context_text: &str, program: &str) -> Result<String, String> {
    let prior = context(context_text)?;
    let next = apply(program, &prior, "program")?;
    render_context(&next, None).map_err(|e| e.to_string())
}

#[derive(Debug, PartialEq, Serialize)]
pub struct Scores {
    pub h_ged: f64,
    pub s_ged: f64,
    pub h_red: Option<f64>,
    pub s_red: Option<f64>,
}

/// Scores a predicted program against a reference program, both applied to
/// the same context. RED uses word-overlap similarity and is `None` when the
/// reference adds nothing.
pub fn score_text(context_text: &str, predicted: &str, reference: &str) -> Result<Scores, String> {
    let prior = context(context_text)?;
    let pred = apply(predicted, &prior, "prediction")?;
    let gold = apply(reference, &prior, "reference")?;
    let g = |m| ged(&pred, &gold, &prior, m).map_err(|e| e.to_string());
    let r = |m| red(&pred, &gold, &prior, m, &JaccardSimilarity).ok();
    Ok(Scores {
        h_ged: g(MetricMode::Hard)?,
        s_ged: g(MetricMode::Soft)?,
        h_red: r(MetricMode::Hard),
        s_red: r(MetricMode::Soft),
    })
}

/// Orthogonality loss of the given rows at `steps + 1` evenly spaced margins
/// in [0, 1]. Returns `(margin, loss)` pairs.
pub fn ortho_curve_values(rows: &[Vec<f64>], steps: usize) -> Result<Vec<(f64, f64)>, String> {
    if steps == 0 {
        return Err("steps must be positive".into());
    }
    let batch = EmbeddingBatch::from_rows(rows).map_err(|e| e.to_string())?;
    (0..=steps)
        .map(|i| {
            let h = i as f64 / steps as f64;
            ortho_loss(&batch, h).map(|l| (h, l)).map_err(|e| e.to_string())
        })
        .collect()
}

#[wasm_bindgen(js_name = executeProgram)]
pub fn execute_program(context_text: &str, program: &str) -> Result<String, JsValue> {
    execute_text(context_text, program).map_err(|e| JsValue::from_str(&e))
}

/// JSON object with `h_ged`, `s_ged`, `h_red`, `s_red`.
#[wasm_bindgen(js_name = scorePrediction)]
pub fn score_prediction(context_text: &str, predicted: &str, reference: &str) -> Result<String, JsValue> {
    let s = score_text(context_text, predicted, reference).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&s).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// `rows_json` is a JSON array of equal-length number arrays. Returns a JSON
/// array of `[margin, loss]` pairs.
#[wasm_bindgen(js_name = orthoCurve)]
pub fn ortho_curve(rows_json: &str, steps: usize) -> Result<String, JsValue> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(rows_json).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let curve = ortho_curve_values(&rows, steps).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&curve).map_err(|e| JsValue::from_str(&e.to_string()))
}
