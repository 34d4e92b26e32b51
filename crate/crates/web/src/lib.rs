//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The page trains a model in small increments so it can redraw the loss curve
//! between calls. Each exported method has a plain Rust counterpart (`try_*`)
//! that the native tests exercise.

use dmsva_core::evaluator::{evaluate_dmsva, EvalOptions, EvalSplit};
use dmsva_core::synthgen::{build_world, make_dataset, DEFAULT_MODE_MIX};
use dmsva_core::trainer::{batch_indices, init_model};
use dmsva_core::{LatentWorld, SamplePair, TrainConfig, Trainer, WorldSpec};
use wasm_bindgen::prelude::*;

/// Upper bound on steps per `train` call; keeps the page responsive.
pub const MAX_STEPS_PER_CALL: u32 = 500;

#[wasm_bindgen]
pub struct Demo {
    world: LatentWorld,
    pairs: Vec<SamplePair>,
    trainer: Trainer,
    losses: Vec<f64>,
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

impl Demo {
    pub fn try_new(seed: u64, dim: usize, slot_count: usize, n_samples: usize) -> Result<Demo, String> {
        let spec = WorldSpec { dim, seed, ..WorldSpec::default() };
        let world = build_world(&spec).map_err(|e| e.to_string())?;
        let dataset = make_dataset(&world, n_samples, DEFAULT_MODE_MIX, seed).map_err(|e| e.to_string())?;
        let cfg = TrainConfig { slot_count, seed, ..TrainConfig::default() };
        let model = init_model(&cfg, dim).map_err(|e| e.to_string())?;
        let trainer = Trainer::new(model, cfg).map_err(|e| e.to_string())?;
        Ok(Demo { world, pairs: dataset.pairs, trainer, losses: Vec::new() })
    }

    /// Runs `steps` more updates and returns their total losses.
    pub fn try_train(&mut self, steps: u32) -> Result<Vec<f64>, String> {
        let steps = steps.min(MAX_STEPS_PER_CALL);
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let idx = batch_indices(self.pairs.len(), self.trainer.config(), self.trainer.step());
            let batch: Vec<SamplePair> = idx.into_iter().map(|i| self.pairs[i].clone()).collect();
            let b = self.trainer.train_step(&batch).map_err(|e| e.to_string())?;
            out.push(b.total);
        }
        self.losses.extend_from_slice(&out);
        Ok(out)
    }

    /// Visual-pathway weights for the noise-free face of (`character`, `environment`):
    /// the timbre bank's N weights followed by the sound bank's N weights.
    pub fn try_attention(&self, character: usize, environment: usize) -> Result<Vec<f64>, String> {
        let spec = &self.world.spec;
        if character >= spec.n_characters || environment >= spec.n_environments {
            return Err(format!(
                "cell ({character}, {environment}) outside the {}x{} world",
                spec.n_characters, spec.n_environments
            ));
        }
        let v = self.world.clean_visual(character, environment);
        let out = self.trainer.model().recall_from_visual(&v).map_err(|e| e.to_string())?;
        let mut w = out.timbre_weights.as_slice().to_vec();
        w.extend_from_slice(out.sound_weights.as_slice());
        Ok(w)
    }

    /// `[recall@1, recall@5, timbre_margin, env_margin]` on the held-out grid.
    pub fn try_evaluate(&self) -> Result<Vec<f64>, String> {
        let opts = EvalOptions::default();
        let split = EvalSplit::grid(&self.world, &opts);
        let r = evaluate_dmsva(self.trainer.model(), &self.world, &split, &opts, self.trainer.config())
            .map_err(|e| e.to_string())?;
        Ok(vec![
            r.recall_at_1,
            r.recall_at_5,
            r.timbre_margin.unwrap_or(f64::NAN),
            r.env_margin.unwrap_or(f64::NAN),
        ])
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, dim: u32, slot_count: u32, n_samples: u32) -> Result<Demo, JsError> {
        js(Demo::try_new(seed as u64, dim as usize, slot_count as usize, n_samples as usize))
    }

    pub fn train(&mut self, steps: u32) -> Result<Vec<f64>, JsError> {
        js(self.try_train(steps))
    }

    pub fn attention(&self, character: u32, environment: u32) -> Result<Vec<f64>, JsError> {
        js(self.try_attention(character as usize, environment as usize))
    }

    pub fn evaluate(&self) -> Result<Vec<f64>, JsError> {
        js(self.try_evaluate())
    }

    /// Every loss returned by `train` so far.
    pub fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    pub fn step(&self) -> u32 {
        self.trainer.step() as u32
    }

    #[wasm_bindgen(getter)]
    pub fn slot_count(&self) -> u32 {
        self.trainer.model().slot_count() as u32
    }

    #[wasm_bindgen(getter)]
    pub fn characters(&self) -> u32 {
        self.world.spec.n_characters as u32
    }

    #[wasm_bindgen(getter)]
    pub fn environments(&self) -> u32 {
        self.world.spec.n_environments as u32
    }
}
