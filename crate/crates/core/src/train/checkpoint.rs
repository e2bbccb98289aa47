//! Resumable checkpoints: model weights, optimizer moments, schedule position,
//! data RNG state, the hand template, and all configs in one array container.
//!
//! Loading rebuilds the model from the stored config and restores every state
//! component, so a resumed run replays the exact sample order and produces
//! bit-identical weights to an uninterrupted run.

use super::{AdamW, TrainConfig, Trainer, TrainSources};
use crate::error::{Error, Result};
use crate::hand::HandTemplate;
use crate::io::ArrayFile;
use crate::losses::LossConfig;
use crate::network::{Model, ModelConfig};
use crate::rng::RngState;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::path::Path;

const SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    schema: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    loss_config: LossConfig,
    span_idx: usize,
    adam_t: u64,
    rng: RngState,
}

pub fn checkpoint_save(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let (span_idx, rng, opt) = trainer.state_for_checkpoint();
    let mut file = ArrayFile::new();
    for (name, value) in trainer.model.state_arrays() {
        file.insert_f64(format!("param/{name}"), value);
    }
    for (p, m) in trainer.model.params().iter().zip(&opt.m) {
        file.insert_f64(format!("adam_m/{}", p.name()), m.clone());
    }
    for (p, v) in trainer.model.params().iter().zip(&opt.v) {
        file.insert_f64(format!("adam_v/{}", p.name()), v.clone());
    }
    file.insert_f64("template/rest_joints", trainer.template.rest_joints.clone().into_dyn());
    file.insert_i64(
        "template/parents",
        ndarray::Array1::from_vec(trainer.template.parents.clone()).into_dyn(),
    );
    file.insert_f64("template/shape_basis", trainer.template.shape_basis.clone().into_dyn());
    file.insert_f64(
        "template/rest_vertices",
        trainer.template.rest_vertices.clone().into_dyn(),
    );
    file.insert_f64(
        "template/skin_weights",
        trainer.template.skin_weights.clone().into_dyn(),
    );
    file.meta = serde_json::to_value(CheckpointMeta {
        schema: SCHEMA,
        model_config: trainer.model.config.clone(),
        train_config: trainer.cfg.clone(),
        loss_config: trainer.loss_cfg.clone(),
        span_idx,
        adam_t: opt.t,
        rng,
    })?;
    file.save(path)
}

/// A deserialized checkpoint, ready for evaluation/inference or to resume
/// training via [`LoadedCheckpoint::into_trainer`].
pub struct LoadedCheckpoint {
    pub model: Model,
    pub template: HandTemplate,
    pub train_config: TrainConfig,
    pub loss_config: LossConfig,
    pub span_idx: usize,
    adam_t: u64,
    adam_m: Vec<ArrayD<f64>>,
    adam_v: Vec<ArrayD<f64>>,
    rng: RngState,
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let file = ArrayFile::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
    if meta.schema != SCHEMA {
        return Err(Error::Checkpoint(format!(
            "checkpoint schema {} unsupported",
            meta.schema
        )));
    }
    let model = Model::new(meta.model_config.clone(), meta.train_config.seed)?;
    let state: Vec<(String, ArrayD<f64>)> = model
        .params()
        .iter()
        .map(|p| {
            file.f64_checked(&format!("param/{}", p.name()), &p.shape())
                .map(|a| (p.name().to_string(), a.clone()))
        })
        .collect::<Result<_>>()?;
    model.load_state_arrays(&state)?;

    let nv = file.f64_array("template/rest_vertices")?.shape()[0];
    let template = HandTemplate {
        rest_joints: file
            .f64_checked("template/rest_joints", &[21, 3])?
            .clone()
            .into_dimensionality()
            .unwrap(),
        parents: file.i64_array("template/parents")?.iter().cloned().collect(),
        shape_basis: file
            .f64_checked("template/shape_basis", &[21, 3, 10])?
            .clone()
            .into_dimensionality()
            .unwrap(),
        rest_vertices: file
            .f64_checked("template/rest_vertices", &[nv, 3])?
            .clone()
            .into_dimensionality()
            .unwrap(),
        skin_weights: file
            .f64_checked("template/skin_weights", &[nv, 21])?
            .clone()
            .into_dimensionality()
            .unwrap(),
    };
    template.validate()?;

    let adam_m = model
        .params()
        .iter()
        .map(|p| {
            file.f64_checked(&format!("adam_m/{}", p.name()), &p.shape())
                .cloned()
        })
        .collect::<Result<Vec<_>>>()?;
    let adam_v = model
        .params()
        .iter()
        .map(|p| {
            file.f64_checked(&format!("adam_v/{}", p.name()), &p.shape())
                .cloned()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(LoadedCheckpoint {
        model,
        template,
        train_config: meta.train_config,
        loss_config: meta.loss_config,
        span_idx: meta.span_idx,
        adam_t: meta.adam_t,
        adam_m,
        adam_v,
        rng: meta.rng,
    })
}

impl LoadedCheckpoint {
    /// Error if the checkpoint was produced under a different model config.
    pub fn assert_model_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model.config != expected {
            return Err(Error::Checkpoint(
                "checkpoint model config differs from the requested one".into(),
            ));
        }
        Ok(())
    }

    /// Rebuild a trainer that continues exactly where the checkpoint stopped.
    pub fn into_trainer(self, sources: &TrainSources) -> Result<Trainer> {
        let mut trainer = Trainer::new(
            self.model,
            self.template,
            self.loss_config,
            self.train_config,
            sources,
        )?;
        // Trainer::new built fresh optimizer moments of the right shapes;
        // swap in the stored state.
        let _ = AdamW::new(
            trainer.model.params(),
            trainer.cfg.beta1,
            trainer.cfg.beta2,
            trainer.cfg.eps,
            trainer.cfg.weight_decay,
        );
        trainer.restore_state(self.span_idx, self.rng, self.adam_t, self.adam_m, self.adam_v);
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_batch, GenConfig};
    use crate::hand::{build_toy_template, TemplateConfig};

    fn setup() -> (Trainer, TrainSources) {
        let template = build_toy_template(&TemplateConfig::default()).unwrap();
        let gen = GenConfig {
            views_min: 2,
            views_max: 3,
            ..Default::default()
        };
        let multi = generate_batch(3, 9, &gen, &template).unwrap();
        let sources = TrainSources { single: vec![], multi };
        let model = Model::new(
            ModelConfig {
                embed_dim: 32,
                aggregator_depth: 1,
                refine_blocks: 2,
                heads: 2,
                mlp_ratio: 2,
                head_hidden: 32,
                zero_init_heads: false,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let cfg = TrainConfig {
            total_steps: 8,
            accumulation: 2,
            n_img: 3,
            views_min: 2,
            views_max: 3,
            lr_peak: 1e-3,
            seed: 21,
            ..Default::default()
        };
        let loss_cfg = LossConfig {
            blocks: 2,
            ..Default::default()
        };
        (
            Trainer::new(model, template, loss_cfg, cfg, &sources).unwrap(),
            sources,
        )
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("mid.ckpt");

        // Uninterrupted: 4 spans.
        let (mut full, sources) = setup();
        let mut full_logs = Vec::new();
        while !full.is_finished() {
            full_logs.push(full.step_span(&sources).unwrap().total);
        }

        // Interrupted at span 2, checkpointed, resumed.
        let (mut half, _) = setup();
        let mut half_logs = Vec::new();
        for _ in 0..2 {
            half_logs.push(half.step_span(&sources).unwrap().total);
        }
        checkpoint_save(&half, &ckpt).unwrap();
        let mut resumed = checkpoint_load(&ckpt).unwrap().into_trainer(&sources).unwrap();
        assert_eq!(resumed.span_index(), 2);
        while !resumed.is_finished() {
            half_logs.push(resumed.step_span(&sources).unwrap().total);
        }

        assert_eq!(full_logs, half_logs, "loss sequence must match bit-for-bit");
        for (a, b) in full
            .model
            .state_arrays()
            .iter()
            .zip(resumed.model.state_arrays().iter())
        {
            assert_eq!(a.1, b.1, "weights differ for {}", a.0);
        }
    }

    #[test]
    fn mismatched_model_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.ckpt");
        let (trainer, _) = setup();
        checkpoint_save(&trainer, &ckpt).unwrap();
        let loaded = checkpoint_load(&ckpt).unwrap();
        let other = ModelConfig {
            embed_dim: 64,
            ..loaded.model.config.clone()
        };
        assert!(loaded.assert_model_config(&other).is_err());
        assert!(loaded.assert_model_config(&loaded.model.config.clone()).is_ok());
    }
}
