//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every result crosses the boundary as a JSON string.

pub mod demo;

use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(value: genref_core::Result<T>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

/// Metric report for line-paired hypotheses and references.
#[wasm_bindgen(js_name = scoreLines)]
pub fn score_lines(hyps: &str, refs: &str, seed: u32) -> Result<String, JsError> {
    to_json(demo::score_lines(hyps, refs, u64::from(seed)))
}

/// Generated samples with their scenes, questions, captions and gold outputs.
#[wasm_bindgen]
pub fn scenes(seed: u32, n: usize, k: usize) -> Result<String, JsError> {
    to_json(demo::scenes(u64::from(seed), n, k))
}

#[wasm_bindgen]
pub struct Trainer(demo::Demo);

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, n: usize, k: usize) -> Result<Trainer, JsError> {
        demo::Demo::new(u64::from(seed), n, k)
            .map(Trainer)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen(getter)]
    pub fn epoch(&self) -> usize {
        self.0.epoch()
    }

    #[wasm_bindgen(getter, js_name = valLen)]
    pub fn val_len(&self) -> usize {
        self.0.val_len()
    }

    #[wasm_bindgen(js_name = trainEpoch)]
    pub fn train_epoch(&mut self) -> Result<String, JsError> {
        to_json(self.0.train_epoch())
    }

    pub fn attention(&self, index: usize) -> Result<String, JsError> {
        to_json(self.0.attention(index))
    }
}
