//! WebAssembly bindings for the demo page in `www/`.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(e: maml_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A synthetic phantom with two complementary contrast phases.
#[wasm_bindgen]
pub struct Phantom(demo::Phantom);

#[wasm_bindgen]
impl Phantom {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, noise_sigma: f64, size: usize) -> Result<Phantom, JsError> {
        demo::Phantom::new(seed.into(), noise_sigma, size).map(Phantom).map_err(js)
    }

    pub fn size(&self) -> usize {
        self.0.size()[0]
    }

    pub fn lesions(&self) -> usize {
        self.0.raw.lesions.len()
    }

    /// RGBA bytes for `layer` in `AP`, `VP`, `mask`, `regions`.
    pub fn slice(&self, layer: &str, z: usize) -> Result<Vec<u8>, JsError> {
        self.0.slice(layer, z).map_err(js)
    }

    /// `[dice, assd]` of the mask against itself shifted by `(dz, dy, dx)`.
    #[wasm_bindgen(js_name = shiftedMetrics)]
    pub fn shifted_metrics(&self, dz: i32, dy: i32, dx: i32, spacing_z: f64) -> Result<Vec<f64>, JsError> {
        let (d, a) = self.0.shifted_metrics([dz.into(), dy.into(), dx.into()], spacing_z).map_err(js)?;
        Ok(vec![d, a])
    }
}

/// In-page training of a small fused model.
#[wasm_bindgen]
pub struct Trainer(demo::Trainer);

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Trainer, JsError> {
        demo::Trainer::new(seed.into()).map(Trainer).map_err(js)
    }

    pub fn size(&self) -> usize {
        demo::TRAINER_SIZE
    }

    pub fn epochs(&self) -> usize {
        self.0.epochs()
    }

    /// Trains for `epochs` more epochs; returns the final epoch loss.
    pub fn run(&mut self, epochs: usize) -> Result<f64, JsError> {
        self.0.run(epochs).map_err(js)
    }

    pub fn dice(&self) -> Result<f64, JsError> {
        self.0.dice().map_err(js)
    }

    #[wasm_bindgen(js_name = attentionSlice)]
    pub fn attention_slice(&mut self, modality: &str, z: usize) -> Result<Vec<u8>, JsError> {
        self.0.attention_slice(modality, z).map_err(js)
    }

    #[wasm_bindgen(js_name = predictionSlice)]
    pub fn prediction_slice(&mut self, z: usize) -> Result<Vec<u8>, JsError> {
        self.0.prediction_slice(z).map_err(js)
    }
}
